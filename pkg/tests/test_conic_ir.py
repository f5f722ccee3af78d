import math

import pytest
from hypothesis import given, settings, strategies as st

from robust_sbm.conic_ir import (INF, AffineExpr, ConicProgram, DualsUnavailable, LinearConstraint, ProgramBuilder,
                                 Relation, Sense, SolverParams, Status, Variable, dual_values, dumps, loads,
                                 max_violation, solve, validate)

BACKENDS = ["highs", "clarabel"]


def lp(rows, objective=None, sense=Sense.MAX, name="t"):
    b = ProgramBuilder(name, sense)
    for v in sorted({v for _, c, _, _ in rows for v in c} | set(objective or {})):
        b.var(v)
    for rname, coeffs, rel, rhs in rows:
        b.row(rname, coeffs, rel, rhs)
    (b.maximize if sense is Sense.MAX else b.minimize)(objective or {"p": 1.0})
    return b.build()


def test_validate_well_formed():
    prog = lp([("r", {"x": 1.0, "y": 1.0}, "<=", 1.0)], {"x": 1.0, "y": 2.0})
    assert validate(prog) == []


def test_validate_undeclared_variable():
    prog = ConicProgram("t", Sense.MAX, (Variable("x"),), (("x", 1.0),),
                        (LinearConstraint("r0", (("q9", 1.0),), Relation.LE, 1.0),), ())
    defects = validate(prog)
    assert len(defects) == 1 and "q9" in defects[0]


def test_validate_nan_coefficient():
    prog = ConicProgram("t", Sense.MAX, (Variable("x"),), (("x", 1.0),),
                        (LinearConstraint("r0", (("x", 1.0),), Relation.LE, 1.0),
                         LinearConstraint("r1", (("x", math.nan),), Relation.LE, 1.0)), ())
    defects = validate(prog)
    assert len(defects) == 1 and "constraint 1" in defects[0]


def test_validate_bounds_and_duplicates():
    prog = ConicProgram("t", Sense.MAX, (Variable("x", 2.0), Variable("x")), (("x", 1.0),), (), ())
    defects = validate(prog)
    assert any("twice" in d for d in defects) and any("lower bound" in d for d in defects)
    with pytest.raises(ValueError):
        solve(prog)


@pytest.mark.parametrize("backend", BACKENDS)
def test_simple_optimum(backend):
    out = solve(lp([("cap", {"p": 1.0}, "<=", 1.0)]), SolverParams(backend=backend))
    assert out.status is Status.OPTIMAL
    assert out.assignment["p"] == pytest.approx(1.0, abs=1e-7)
    assert out.objective == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("backend", BACKENDS)
def test_infeasible(backend):
    prog = lp([("lo", {"p": 1.0}, ">=", 2.0), ("hi", {"p": 1.0}, "<=", 1.0)])
    out = solve(prog, SolverParams(backend=backend))
    assert out.status is Status.INFEASIBLE
    assert out.assignment is None and out.objective is None


@pytest.mark.parametrize("backend", BACKENDS)
def test_unbounded(backend):
    prog = lp([("lo", {"p": 1.0}, ">=", 2.0)])
    assert solve(prog, SolverParams(backend=backend)).status is Status.UNBOUNDED


def test_soc_closed_form():
    b = ProgramBuilder("soc")
    b.var("p")
    b.maximize({"p": 1.0})
    b.soc("ball", [AffineExpr.of({"p": 1.0}), AffineExpr.of({"p": 1.0})], AffineExpr.of({}, math.sqrt(2.0)))
    out = solve(b.build())
    assert out.backend == "clarabel" and out.status is Status.OPTIMAL
    assert out.assignment["p"] == pytest.approx(1.0, abs=1e-7)
    with pytest.raises(ValueError):
        solve(b.build(), SolverParams(backend="highs"))


def test_soc_infeasible():
    b = ProgramBuilder("soc")
    b.var("p")
    b.maximize({"p": 1.0})
    b.row("lo", {"p": 1.0}, ">=", 2.0)
    b.soc("ball", [AffineExpr.of({"p": 1.0})], AffineExpr.of({}, 1.0))
    assert solve(b.build()).status is Status.INFEASIBLE


def test_iteration_limit_is_numerical_failure():
    b = ProgramBuilder("soc")
    b.var("p")
    b.var("q")
    b.maximize({"p": 1.0, "q": 1.0})
    b.soc("ball", [AffineExpr.of({"p": 1.0}), AffineExpr.of({"q": 3.0})], AffineExpr.of({}, 1.0))
    out = solve(b.build(), SolverParams(max_iter=1))
    assert out.status is Status.NUMERICAL_FAILURE
    assert out.assignment is None


@pytest.mark.parametrize("backend", BACKENDS)
def test_duals_active_and_inactive(backend):
    prog = lp([("cap", {"x": 1.0}, "<=", 3.0), ("loose", {"x": 1.0}, "<=", 100.0)], {"x": 1.0})
    out = solve(prog, SolverParams(backend=backend))
    duals = dual_values(out, prog)
    assert duals["cap"] == pytest.approx(1.0, abs=1e-6)
    assert duals["loose"] == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("backend", BACKENDS)
def test_duals_degenerate_pair(backend):
    prog = lp([("a", {"x": 1.0}, "<=", 3.0), ("b", {"x": 1.0}, "<=", 3.0)], {"x": 1.0})
    duals = dual_values(solve(prog, SolverParams(backend=backend)), prog)
    # every optimal dual is a convex split of the unit gradient
    assert duals["a"] >= -1e-7 and duals["b"] >= -1e-7
    assert duals["a"] + duals["b"] == pytest.approx(1.0, abs=1e-6)


def test_duals_unavailable():
    prog = lp([("lo", {"p": 1.0}, ">=", 2.0), ("hi", {"p": 1.0}, "<=", 1.0)])
    with pytest.raises(DualsUnavailable):
        dual_values(solve(prog), prog)


@st.composite
def random_lps(draw):
    """Bounded feasible LPs: random <= rows with positive rhs, x >= 0, plus a box row."""
    nv = draw(st.integers(1, 5))
    nr = draw(st.integers(1, 5))
    coef = st.floats(-5, 5, allow_nan=False).map(lambda v: round(v, 3))
    b = ProgramBuilder("rand", draw(st.sampled_from(list(Sense))))
    names = [b.var(f"x{i}") for i in range(nv)]
    for r in range(nr):
        b.row(f"r{r}", {v: draw(coef) for v in names}, draw(st.sampled_from(["<=", ">=", "="])) if r else "<=",
              draw(st.floats(0.5, 10)))
    b.row("box", {v: 1.0 for v in names}, "<=", 20.0)
    obj = {v: draw(coef) for v in names}
    (b.maximize if b.sense is Sense.MAX else b.minimize)(obj)
    return b.build()


@settings(max_examples=80, deadline=None)
@given(random_lps())
def test_backends_agree_and_slackness(prog):
    a = solve(prog, SolverParams(backend="highs"))
    b = solve(prog, SolverParams(backend="clarabel"))
    assert a.status == b.status or Status.NUMERICAL_FAILURE in (a.status, b.status)
    if a.status is not Status.OPTIMAL or b.status is not Status.OPTIMAL:
        return
    assert a.objective == pytest.approx(b.objective, abs=1e-5, rel=1e-5)
    for out in (a, b):
        assert max_violation(prog, out.assignment) <= 1e-7
        assert abs(out.objective - prog.objective_value(out.assignment)) <= 1e-6
        duals = dual_values(out, prog)
        for row in prog.linear_constraints:
            slack = row.lhs(out.assignment) - row.rhs
            y = duals[row.name]
            assert abs(y * slack) <= 1e-5 * max(1.0, abs(y))
            if row.relation is Relation.LE:
                assert (y >= -1e-6) if prog.sense is Sense.MAX else (y <= 1e-6)


@settings(max_examples=60, deadline=None)
@given(random_lps())
def test_dump_round_trip(prog):
    b = ProgramBuilder(prog.name, prog.sense)
    for v in prog.variables:
        b.var(v.name)
    b.var("free", lower=-INF)
    for row in prog.linear_constraints:
        b.row(row.name, dict(row.terms), row.relation, row.rhs)
    b.soc("c", [AffineExpr.of({"x0": 0.1}, 1e-17), AffineExpr.of({"free": -3.0})], AffineExpr.of({"x0": 2.0}, 1 / 3))
    (b.maximize if prog.sense is Sense.MAX else b.minimize)(dict(prog.objective))
    full = b.build()
    text = dumps(full)
    again = loads(text)
    assert again == full
    assert dumps(again) == text
