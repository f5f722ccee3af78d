"""Solver-agnostic representation of linear and second-order cone programs.

A :class:`ConicProgram` is an immutable value.  Builders assemble one through
:class:`ProgramBuilder`; :func:`solve` dispatches it to a backend (HiGHS for
pure LPs, Clarabel for anything with cones) and returns a :class:`SolveOutcome`
whose assignment has been re-checked against every constraint.
"""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

INF = math.inf

__all__ = [
    "AffineExpr",
    "ConicProgram",
    "DualsUnavailable",
    "LinearConstraint",
    "ProgramBuilder",
    "Relation",
    "Sense",
    "SocConstraint",
    "SolveOutcome",
    "SolverParams",
    "Status",
    "Variable",
    "constraint_violations",
    "dual_values",
    "dumps",
    "loads",
    "max_violation",
    "solve",
    "validate",
]


class Sense(str, enum.Enum):
    MAX = "max"
    MIN = "min"


class Relation(str, enum.Enum):
    LE = "<="
    EQ = "="
    GE = ">="


class Status(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    NUMERICAL_FAILURE = "numerical_failure"


class DualsUnavailable(RuntimeError):
    """The backend produced no dual information for this outcome."""


Terms = tuple[tuple[str, float], ...]


def _merge(terms: Iterable[tuple[str, float]]) -> Terms:
    acc: dict[str, float] = {}
    for name, coef in terms:
        acc[name] = acc.get(name, 0.0) + float(coef)
    return tuple((k, v) for k, v in acc.items() if v != 0.0)


@dataclass(frozen=True)
class Variable:
    name: str
    lower: float = 0.0
    upper: float = INF


@dataclass(frozen=True)
class AffineExpr:
    terms: Terms = ()
    constant: float = 0.0

    @classmethod
    def of(cls, coeffs: Mapping[str, float] | Iterable[tuple[str, float]] = (),
           constant: float = 0.0) -> "AffineExpr":
        items = coeffs.items() if isinstance(coeffs, Mapping) else coeffs
        return cls(_merge(items), float(constant))

    def evaluate(self, values: Mapping[str, float]) -> float:
        return self.constant + sum(c * values[v] for v, c in self.terms)


@dataclass(frozen=True)
class LinearConstraint:
    name: str
    terms: Terms
    relation: Relation
    rhs: float

    def lhs(self, values: Mapping[str, float]) -> float:
        return sum(c * values[v] for v, c in self.terms)


@dataclass(frozen=True)
class SocConstraint:
    """``||members||_2 <= bound`` with every member affine in the variables."""

    name: str
    members: tuple[AffineExpr, ...]
    bound: AffineExpr


@dataclass(frozen=True)
class ConicProgram:
    name: str
    sense: Sense
    variables: tuple[Variable, ...]
    objective: Terms
    linear_constraints: tuple[LinearConstraint, ...] = ()
    soc_constraints: tuple[SocConstraint, ...] = ()

    @property
    def is_lp(self) -> bool:
        return not self.soc_constraints

    def variable_names(self) -> list[str]:
        return [v.name for v in self.variables]

    def objective_value(self, values: Mapping[str, float]) -> float:
        return sum(c * values[v] for v, c in self.objective)

    def constraint(self, name: str) -> LinearConstraint:
        for row in self.linear_constraints:
            if row.name == name:
                return row
        raise KeyError(name)


class ProgramBuilder:
    """Mutable accumulator that freezes into a :class:`ConicProgram`."""

    def __init__(self, name: str, sense: Sense = Sense.MAX):
        self.name = name
        self.sense = sense
        self._vars: dict[str, Variable] = {}
        self._objective: list[tuple[str, float]] = []
        self._rows: list[LinearConstraint] = []
        self._cones: list[SocConstraint] = []

    def var(self, name: str, lower: float = 0.0, upper: float = INF) -> str:
        if name in self._vars:
            raise ValueError(f"variable {name!r} declared twice")
        self._vars[name] = Variable(name, lower, upper)
        return name

    def has_var(self, name: str) -> bool:
        return name in self._vars

    def maximize(self, coeffs: Mapping[str, float]) -> None:
        self.sense = Sense.MAX
        self._objective = list(coeffs.items())

    def minimize(self, coeffs: Mapping[str, float]) -> None:
        self.sense = Sense.MIN
        self._objective = list(coeffs.items())

    def row(self, name: str, coeffs: Mapping[str, float] | Iterable[tuple[str, float]],
            relation: Relation | str, rhs: float = 0.0) -> None:
        items = coeffs.items() if isinstance(coeffs, Mapping) else coeffs
        self._rows.append(LinearConstraint(name, _merge(items), Relation(relation), float(rhs)))

    def soc(self, name: str, members: Iterable[AffineExpr], bound: AffineExpr) -> None:
        self._cones.append(SocConstraint(name, tuple(members), bound))

    def build(self) -> ConicProgram:
        return ConicProgram(
            name=self.name,
            sense=self.sense,
            variables=tuple(self._vars.values()),
            objective=_merge(self._objective),
            linear_constraints=tuple(self._rows),
            soc_constraints=tuple(self._cones),
        )


# ---------------------------------------------------------------------------
# validation


def _bad_number(x: float) -> bool:
    return not math.isfinite(x)


def validate(program: ConicProgram) -> list[str]:
    """Return a list of human-readable defects; empty iff the program is well formed."""
    defects: list[str] = []
    declared: set[str] = set()
    for v in program.variables:
        if v.name in declared:
            defects.append(f"variable {v.name!r} declared twice")
        declared.add(v.name)
        if not v.name or any(ch.isspace() for ch in v.name):
            defects.append(f"variable name {v.name!r} is empty or contains whitespace")
        if v.lower not in (0.0, -INF):
            defects.append(f"variable {v.name!r} has lower bound {v.lower!r}; only 0 or -inf allowed")
        if v.upper != INF:
            defects.append(f"variable {v.name!r} has upper bound {v.upper!r}; only +inf allowed")

    def check_terms(where: str, terms: Terms) -> None:
        for name, coef in terms:
            if name not in declared:
                defects.append(f"{where} references undeclared variable {name!r}")
            if _bad_number(coef):
                defects.append(f"{where} has non-finite coefficient {coef!r} on {name!r}")

    check_terms("objective", program.objective)
    for idx, row in enumerate(program.linear_constraints):
        where = f"linear constraint {idx} ({row.name})"
        check_terms(where, row.terms)
        if _bad_number(row.rhs):
            defects.append(f"{where} has non-finite rhs {row.rhs!r}")
    for idx, cone in enumerate(program.soc_constraints):
        where = f"soc constraint {idx} ({cone.name})"
        if not cone.members:
            defects.append(f"{where} has no members")
        for expr in (*cone.members, cone.bound):
            check_terms(where, expr.terms)
            if _bad_number(expr.constant):
                defects.append(f"{where} has non-finite constant {expr.constant!r}")
    return defects


# ---------------------------------------------------------------------------
# debug text format
#
#   program NAME / sense max|min / var NAME LB UB / obj NAME COEF
#   row NAME REL RHS  followed by  term NAME COEF lines
#   soc NAME  then  member CONST | bound CONST, each followed by term lines
#   end


def _fmt(x: float) -> str:
    return repr(float(x))


def dumps(program: ConicProgram) -> str:
    out = [f"program {program.name}", f"sense {program.sense.value}"]
    for v in program.variables:
        out.append(f"var {v.name} {_fmt(v.lower)} {_fmt(v.upper)}")
    for name, coef in program.objective:
        out.append(f"obj {name} {_fmt(coef)}")
    for row in program.linear_constraints:
        out.append(f"row {row.name} {row.relation.value} {_fmt(row.rhs)}")
        out.extend(f"term {n} {_fmt(c)}" for n, c in row.terms)
    for cone in program.soc_constraints:
        out.append(f"soc {cone.name}")
        for member in cone.members:
            out.append(f"member {_fmt(member.constant)}")
            out.extend(f"term {n} {_fmt(c)}" for n, c in member.terms)
        out.append(f"bound {_fmt(cone.bound.constant)}")
        out.extend(f"term {n} {_fmt(c)}" for n, c in cone.bound.terms)
    out.append("end")
    return "\n".join(out) + "\n"


def loads(text: str) -> ConicProgram:
    name = ""
    sense = Sense.MAX
    variables: list[Variable] = []
    objective: list[tuple[str, float]] = []
    rows: list[LinearConstraint] = []
    cones: list[SocConstraint] = []

    # pending term target: ("row", header) | ("member"/"bound", constant)
    target: list | None = None
    cone_name: str | None = None
    members: list[AffineExpr] = []
    bound: AffineExpr | None = None

    def flush_target() -> None:
        nonlocal target, bound
        if target is None:
            return
        kind, payload, terms = target
        if kind == "row":
            rname, rel, rhs = payload
            rows.append(LinearConstraint(rname, tuple(terms), Relation(rel), rhs))
        elif kind == "member":
            members.append(AffineExpr(tuple(terms), payload))
        elif kind == "bound":
            bound = AffineExpr(tuple(terms), payload)
        target = None

    def flush_cone() -> None:
        nonlocal cone_name, members, bound
        flush_target()
        if cone_name is not None:
            if bound is None:
                raise ValueError(f"soc {cone_name!r} has no bound")
            cones.append(SocConstraint(cone_name, tuple(members), bound))
        cone_name, members, bound = None, [], None

    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        tok = line.split(" ")
        head = tok[0]
        try:
            if head == "program":
                name = line[len("program "):]
            elif head == "sense":
                sense = Sense(tok[1])
            elif head == "var":
                variables.append(Variable(tok[1], float(tok[2]), float(tok[3])))
            elif head == "obj":
                objective.append((tok[1], float(tok[2])))
            elif head == "row":
                flush_cone()
                target = ["row", (tok[1], tok[2], float(tok[3])), []]
            elif head == "term":
                if target is None:
                    raise ValueError("term outside a row/member/bound")
                target[2].append((tok[1], float(tok[2])))
            elif head == "soc":
                flush_cone()
                cone_name = tok[1]
            elif head in ("member", "bound"):
                if cone_name is None:
                    raise ValueError(f"{head} outside a soc block")
                flush_target()
                target = [head, float(tok[1]), []]
            elif head == "end":
                flush_cone()
                break
            else:
                raise ValueError(f"unknown record {head!r}")
        except (IndexError, ValueError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
    else:
        flush_cone()

    return ConicProgram(name, sense, tuple(variables), tuple(objective), tuple(rows), tuple(cones))


# ---------------------------------------------------------------------------
# solving


@dataclass(frozen=True)
class SolverParams:
    tol_feas: float = 1e-7
    tol_obj: float = 1e-6
    max_iter: int = 10_000
    backend: str = "auto"  # auto | highs | clarabel


@dataclass(frozen=True)
class SolveOutcome:
    status: Status
    objective: float | None
    assignment: dict[str, float] | None
    iterations: int
    wall_time: float
    backend: str
    message: str = ""
    duals: dict[str, object] | None = field(default=None, repr=False, compare=False)

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


def constraint_violations(program: ConicProgram, values: Mapping[str, float]) -> dict[str, float]:
    """Positive part of every constraint's violation at ``values`` (bounds included)."""
    viol: dict[str, float] = {}
    for v in program.variables:
        x = values[v.name]
        viol[f"bound:{v.name}"] = max(0.0, v.lower - x, x - v.upper)
    for row in program.linear_constraints:
        lhs = row.lhs(values)
        if row.relation is Relation.LE:
            gap = lhs - row.rhs
        elif row.relation is Relation.GE:
            gap = row.rhs - lhs
        else:
            gap = abs(lhs - row.rhs)
        viol[row.name] = max(0.0, gap)
    for cone in program.soc_constraints:
        norm = math.sqrt(sum(m.evaluate(values) ** 2 for m in cone.members))
        viol[cone.name] = max(0.0, norm - cone.bound.evaluate(values))
    return viol


def max_violation(program: ConicProgram, values: Mapping[str, float]) -> float:
    return max(constraint_violations(program, values).values(), default=0.0)


def _row_matrix(program: ConicProgram, index: Mapping[str, int],
                rows: list[tuple[Terms, float]]) -> sp.csr_matrix:
    data, ri, ci = [], [], []
    for r, (terms, sign) in enumerate(rows):
        for name, coef in terms:
            ri.append(r)
            ci.append(index[name])
            data.append(sign * coef)
    return sp.csr_matrix((data, (ri, ci)), shape=(len(rows), len(index)))


def solve(program: ConicProgram, params: SolverParams | None = None) -> SolveOutcome:
    """Solve ``program``; an Optimal status is only reported after a residual check."""
    params = params or SolverParams()
    defects = validate(program)
    if defects:
        raise ValueError("invalid program: " + "; ".join(defects))
    backend = params.backend
    if backend == "auto":
        backend = "highs" if program.is_lp else "clarabel"
    if backend == "highs":
        if not program.is_lp:
            raise ValueError("the HiGHS backend only accepts programs without cones")
        outcome = _solve_highs(program, params)
    elif backend == "clarabel":
        outcome = _solve_clarabel(program, params)
    else:
        raise ValueError(f"unknown backend {params.backend!r}")

    if outcome.status is Status.OPTIMAL:
        worst = max_violation(program, outcome.assignment)
        if worst > params.tol_feas:
            log.warning("%s: %s solution violates constraints by %.3g", program.name, backend, worst)
            return SolveOutcome(Status.NUMERICAL_FAILURE, None, None, outcome.iterations,
                                outcome.wall_time, backend,
                                f"residual check failed: max violation {worst:.3g}")
    return outcome


def _std_rows(program: ConicProgram):
    """Split rows into (<=, =) lists of (terms, sign, rhs, original index)."""
    le, eq = [], []
    for idx, row in enumerate(program.linear_constraints):
        if row.relation is Relation.EQ:
            eq.append((row.terms, 1.0, row.rhs, idx))
        elif row.relation is Relation.LE:
            le.append((row.terms, 1.0, row.rhs, idx))
        else:
            le.append((row.terms, -1.0, -row.rhs, idx))
    return le, eq


def _objective_vector(program: ConicProgram, index: Mapping[str, int]) -> np.ndarray:
    c = np.zeros(len(index))
    for name, coef in program.objective:
        c[index[name]] += coef
    return c


def _finish(program: ConicProgram, x: np.ndarray, names: list[str]) -> tuple[dict[str, float], float]:
    assignment = {n: float(v) for n, v in zip(names, x)}
    return assignment, program.objective_value(assignment)


def _solve_highs(program: ConicProgram, params: SolverParams) -> SolveOutcome:
    from scipy.optimize import linprog

    names = program.variable_names()
    index = {n: i for i, n in enumerate(names)}
    c = _objective_vector(program, index)
    sense_sign = 1.0 if program.sense is Sense.MAX else -1.0
    le, eq = _std_rows(program)
    a_ub = _row_matrix(program, index, [(t, s) for t, s, _, _ in le]) if le else None
    b_ub = np.array([b for _, _, b, _ in le]) if le else None
    a_eq = _row_matrix(program, index, [(t, s) for t, s, _, _ in eq]) if eq else None
    b_eq = np.array([b for _, _, b, _ in eq]) if eq else None
    bounds = [(None if v.lower == -INF else v.lower, None) for v in program.variables]
    tol = min(1e-9, params.tol_feas)
    start = time.perf_counter()
    res = linprog(
        -sense_sign * c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq, bounds=bounds,
        method="highs",
        options={"maxiter": params.max_iter, "primal_feasibility_tolerance": tol,
                 "dual_feasibility_tolerance": tol, "presolve": True},
    )
    elapsed = time.perf_counter() - start
    nit = int(getattr(res, "nit", 0) or 0)
    if res.status == 0:
        assignment, obj = _finish(program, res.x, names)
        duals: dict[str, object] = {}
        # linprog marginals are d(min objective)/d(rhs) of the rows as passed in
        for (_, sign, _, idx), m in zip(le, res.ineqlin.marginals if le else []):
            duals[program.linear_constraints[idx].name] = float(-sense_sign * sign * m)
        for (_, sign, _, idx), m in zip(eq, res.eqlin.marginals if eq else []):
            duals[program.linear_constraints[idx].name] = float(-sense_sign * sign * m)
        return SolveOutcome(Status.OPTIMAL, obj, assignment, nit, elapsed, "highs", res.message, duals)
    status = {2: Status.INFEASIBLE, 3: Status.UNBOUNDED}.get(res.status, Status.NUMERICAL_FAILURE)
    return SolveOutcome(status, None, None, nit, elapsed, "highs", str(res.message))


def _solve_clarabel(program: ConicProgram, params: SolverParams) -> SolveOutcome:
    import clarabel

    names = program.variable_names()
    index = {n: i for i, n in enumerate(names)}
    n = len(names)
    c = _objective_vector(program, index)
    sense_sign = 1.0 if program.sense is Sense.MAX else -1.0
    le, eq = _std_rows(program)

    blocks: list[sp.csr_matrix] = []
    rhs: list[np.ndarray] = []
    cones = []
    if eq:
        blocks.append(_row_matrix(program, index, [(t, s) for t, s, _, _ in eq]))
        rhs.append(np.array([b for _, _, b, _ in eq]))
        cones.append(clarabel.ZeroConeT(len(eq)))
    lower = [i for i, v in enumerate(program.variables) if v.lower == 0.0]
    n_le = len(le) + len(lower)
    if n_le:
        parts = []
        if le:
            parts.append(_row_matrix(program, index, [(t, s) for t, s, _, _ in le]))
        if lower:
            parts.append(sp.csr_matrix((-np.ones(len(lower)), (np.arange(len(lower)), lower)),
                                       shape=(len(lower), n)))
        blocks.append(sp.vstack(parts, format="csr"))
        rhs.append(np.concatenate([[b for _, _, b, _ in le], np.zeros(len(lower))]))
        cones.append(clarabel.NonnegativeConeT(n_le))
    for cone in program.soc_constraints:
        exprs = (cone.bound, *cone.members)
        mat = _row_matrix(program, index, [(e.terms, -1.0) for e in exprs])
        blocks.append(mat)
        rhs.append(np.array([e.constant for e in exprs]))
        cones.append(clarabel.SecondOrderConeT(len(exprs)))

    a = sp.vstack(blocks, format="csc") if blocks else sp.csc_matrix((0, n))
    b = np.concatenate(rhs) if rhs else np.zeros(0)
    p = sp.csc_matrix((n, n))
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = min(params.max_iter, 500)
    settings.tol_gap_abs = 1e-10
    settings.tol_gap_rel = 1e-10
    settings.tol_feas = 1e-10
    settings.tol_ktratio = 1e-8
    settings.presolve_enable = True
    start = time.perf_counter()
    solver = clarabel.DefaultSolver(p, -sense_sign * c, a, b, cones, settings)
    sol = solver.solve()
    elapsed = time.perf_counter() - start
    status_name = str(sol.status)
    nit = int(sol.iterations)
    if status_name in ("Solved", "AlmostSolved"):
        x = np.asarray(sol.x)
        z = np.asarray(sol.z)
        assignment, obj = _finish(program, x, names)
        duals: dict[str, object] = {}
        offset = 0
        for (_, sign, _, idx), zi in zip(eq, z[:len(eq)]):
            duals[program.linear_constraints[idx].name] = float(sense_sign * sign * zi)
        offset = len(eq)
        for (_, sign, _, idx), zi in zip(le, z[offset:offset + len(le)]):
            duals[program.linear_constraints[idx].name] = float(sense_sign * sign * zi)
        offset += n_le
        for cone in program.soc_constraints:
            width = len(cone.members) + 1
            duals[cone.name] = sense_sign * z[offset:offset + width].copy()
            offset += width
        return SolveOutcome(Status.OPTIMAL, obj, assignment, nit, elapsed, "clarabel",
                            status_name, duals)
    status = {
        "PrimalInfeasible": Status.INFEASIBLE,
        "AlmostPrimalInfeasible": Status.INFEASIBLE,
        "DualInfeasible": Status.UNBOUNDED,
        "AlmostDualInfeasible": Status.UNBOUNDED,
    }.get(status_name, Status.NUMERICAL_FAILURE)
    return SolveOutcome(status, None, None, nit, elapsed, "clarabel", status_name)


def dual_values(outcome: SolveOutcome, program: ConicProgram) -> dict[str, object]:
    """Constraint duals as sensitivities d(optimal objective)/d(rhs).

    Under this convention a ``<=`` row of a Max problem has a nonnegative dual.
    Cone duals are returned as arrays ordered (bound, members...).
    """
    if outcome.status is not Status.OPTIMAL:
        raise DualsUnavailable(f"no duals for status {outcome.status.value}")
    if outcome.duals is None:
        raise DualsUnavailable(f"backend {outcome.backend!r} returned no duals")
    known = {row.name for row in program.linear_constraints} | {c.name for c in program.soc_constraints}
    return {k: v for k, v in outcome.duals.items() if k in known}
