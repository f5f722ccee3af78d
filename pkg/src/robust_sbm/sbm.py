"""Crisp slack-based-measure programs.

Every builder emits the homogenised (fractional-to-linear) form of an SBM ratio:
``p`` homogenises the program, ``lam[j]`` are the scaled intensity weights and
the optimum ``w`` is the reciprocal of the efficiency.

Variable names are shared by all builders (and read back by
:func:`extract_solution`): ``p``, ``w``, ``lam[j]``, ``s_in[i]``, ``s_mid[d]``,
``s_des[r]``, ``s_und[r]`` and the ratio variables ``a[i]``, ``b[d]``,
``c_des[r]``, ``c_und[r]``.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .conic_ir import ConicProgram, ProgramBuilder, Relation, SolveOutcome, Status
from .panel import DmuPanel

log = logging.getLogger(__name__)

EPS_P = 1e-9
P_FLOOR_CHECK = 1e-6
TOL_EFF = 1e-4
W_NOISE = 1e-7  # w below 1 by less than this is solver round-off, clamped silently


class StageRole(str, enum.Enum):
    STAGE1 = "stage1"  # inputs -> intermediates
    STAGE2 = "stage2"  # intermediates -> desirable + undesirable outputs
    BLACKBOX = "blackbox"


class Form(str, enum.Enum):
    EQUALITY = "equality"
    RELAXED = "relaxed"
    ROBUST_READY = "robust_ready"


class UndesirableTerm(str, enum.Enum):
    """How undesirable-output slacks enter the stage-2 objective.

    ``ADD`` counts them as inefficiency alongside desirable shortfalls.
    ``SUBTRACT`` is the literal sign of the published stage-2 models; under it
    the RobustReady form drives the undesirable ratio variables to zero while the
    balance-equality forms cannot, so RobustReady can exceed them whenever
    undesirable outputs exist.
    """

    ADD = "add"
    SUBTRACT = "subtract"

    @property
    def sign(self) -> float:
        return 1.0 if self is UndesirableTerm.ADD else -1.0


class Classification(str, enum.Enum):
    EFFICIENT = "efficient"
    INEFFICIENT = "inefficient"


class StageFailed(RuntimeError):
    """A stage program did not produce a usable optimum."""

    def __init__(self, program: str, status: Status | str, detail: str = ""):
        self.program = program
        self.status = Status(status) if not isinstance(status, Status) else status
        self.detail = detail
        super().__init__(f"{program}: {self.status.value}" + (f" ({detail})" if detail else ""))


def lam(j: int) -> str:
    return f"lam[{j}]"


# ---------------------------------------------------------------------------
# data checks


def _check_k(panel: DmuPanel, k: int) -> None:
    if not 0 <= k < panel.n:
        raise IndexError(f"DMU index {k} out of range for a panel of {panel.n}")


def _check_positive(*named: tuple[str, np.ndarray]) -> None:
    for key, mat in named:
        if mat.size and not (mat > 0).all():
            raise ValueError(f"{key} contains non-positive or missing cells; preprocess the panel first")


def _objective_ratio(coefs: np.ndarray, names: Sequence[str], scale: float, sign: float = 1.0) -> dict[str, float]:
    return {nm: sign * scale / v for nm, v in zip(names, coefs)}


# ---------------------------------------------------------------------------
# black-box models


def _common_vars(b: ProgramBuilder, n: int) -> None:
    b.var("p")
    for j in range(n):
        b.var(lam(j))
    b.row("p_floor", {"p": 1.0}, Relation.GE, EPS_P)
    b.row("vrs", {"p": 1.0, **{lam(j): -1.0 for j in range(n)}}, Relation.EQ, 0.0)


def _balance(b: ProgramBuilder, name: str, data: np.ndarray, k: int, slack: str, slack_sign: float,
             relation: Relation = Relation.EQ) -> None:
    """Row ``p*v_k - sum_j v_j lam_j + slack_sign*slack (rel) 0``.

    Input-like rows pass -1 (``p x_k = sum x lam + S``), output-like rows +1.
    """
    coeffs = {"p": data[k]}
    for j, v in enumerate(data):
        coeffs[lam(j)] = coeffs.get(lam(j), 0.0) - v
    coeffs[slack] = slack_sign
    b.row(name, coeffs, relation, 0.0)


def build_blackbox_sbm(panel: DmuPanel, k: int) -> ConicProgram:
    """Black-box SBM as an LP (inputs -> desirable outputs, intermediates ignored)."""
    _check_k(panel, k)
    if panel.s1 < 1:
        raise ValueError("black-box SBM needs at least one desirable output")
    if panel.s2:
        raise ValueError("panel has undesirable outputs; use build_undesirable_sbm")
    x, y = panel.inputs, panel.desirable
    _check_positive(("inputs", x), ("desirable", y))
    b = ProgramBuilder(f"blackbox/k={k}")
    _common_vars(b, panel.n)
    s_in = [b.var(f"s_in[{i}]") for i in range(panel.m)]
    s_des = [b.var(f"s_des[{r}]") for r in range(panel.s1)]
    b.row("norm", {"p": 1.0, **_objective_ratio(x[k], s_in, 1.0 / panel.m, -1.0)}, Relation.EQ, 1.0)
    for i in range(panel.m):
        _balance(b, f"x[{i}]", x[:, i], k, s_in[i], -1.0)
    for r in range(panel.s1):
        _balance(b, f"yd[{r}]", y[:, r], k, s_des[r], +1.0)
    b.maximize({"p": 1.0, **_objective_ratio(y[k], s_des, 1.0 / panel.s1)})
    return b.build()


def build_undesirable_sbm(panel: DmuPanel, k: int) -> ConicProgram:
    """Black-box SBM with undesirable outputs treated input-like."""
    _check_k(panel, k)
    if panel.s2 < 1:
        raise ValueError("undesirable SBM needs at least one undesirable output")
    x, y, u = panel.inputs, panel.desirable, panel.undesirable
    _check_positive(("inputs", x), ("desirable", y), ("undesirable", u))
    s = panel.s1 + panel.s2
    b = ProgramBuilder(f"undesirable/k={k}")
    _common_vars(b, panel.n)
    s_in = [b.var(f"s_in[{i}]") for i in range(panel.m)]
    s_des = [b.var(f"s_des[{r}]") for r in range(panel.s1)]
    s_und = [b.var(f"s_und[{r}]") for r in range(panel.s2)]
    b.row("norm", {"p": 1.0, **_objective_ratio(x[k], s_in, 1.0 / panel.m, -1.0)}, Relation.EQ, 1.0)
    for i in range(panel.m):
        _balance(b, f"x[{i}]", x[:, i], k, s_in[i], -1.0)
    for r in range(panel.s1):
        _balance(b, f"yd[{r}]", y[:, r], k, s_des[r], +1.0)
    for r in range(panel.s2):
        _balance(b, f"yu[{r}]", u[:, r], k, s_und[r], -1.0)
    b.maximize({"p": 1.0, **_objective_ratio(y[k], s_des, 1.0 / s),
                **_objective_ratio(u[k], s_und, 1.0 / s)})
    return b.build()


# ---------------------------------------------------------------------------
# two-stage models


@dataclass(frozen=True)
class UncertainRow:
    """A ``<= 0`` row whose data coefficients may be perturbed.

    The row reads ``fixed + data[0] <= 0`` at nominal data; ``data[l]`` for
    ``l >= 1`` is the same data-dependent part evaluated on deviation layer ``l``.
    ``family`` names the matrix the data comes from, ``index`` its column.
    """

    name: str
    family: str
    index: int
    fixed: dict[str, float]
    data: tuple[dict[str, float], ...]

    @property
    def nominal(self) -> dict[str, float]:
        out = dict(self.fixed)
        for v, c in self.data[0].items():
            out[v] = out.get(v, 0.0) + c
        return out

    def layers(self) -> tuple[dict[str, float], ...]:
        return self.data[1:]


@dataclass
class StageTemplate:
    """RobustReady stage program before its uncertain rows are committed."""

    builder: ProgramBuilder
    uncertain: list[UncertainRow] = field(default_factory=list)

    def crisp(self) -> ConicProgram:
        for row in self.uncertain:
            self.builder.row(row.name, row.nominal, Relation.LE, 0.0)
        return self.builder.build()


def _stack(nominal: np.ndarray, layers: np.ndarray | None) -> list[np.ndarray]:
    if layers is None:
        return [nominal]
    return [nominal, *list(layers)]


def _input_like(data: list[np.ndarray], col: int, k: int) -> tuple[dict[str, float], ...]:
    """Data part of ``-p v_k + sum_j v_j lam_j``."""
    out = []
    for mat in data:
        coeffs = {"p": -mat[k, col]}
        for j in range(mat.shape[0]):
            coeffs[lam(j)] = coeffs.get(lam(j), 0.0) + mat[j, col]
        out.append(coeffs)
    return tuple(out)


def _output_like(data: list[np.ndarray], col: int, k: int) -> tuple[dict[str, float], ...]:
    """Data part of ``p v_k - sum_j v_j lam_j``."""
    return tuple({v: -c for v, c in d.items()} for d in _input_like(data, col, k))


def _ratio(data: list[np.ndarray], col: int, k: int, var: str) -> tuple[dict[str, float], ...]:
    return tuple({var: mat[k, col]} for mat in data)


def stage1_template(panel: DmuPanel, k: int, layers: dict[str, np.ndarray] | None = None) -> StageTemplate:
    """First-stage RobustReady program with inputs and intermediates as uncertain rows.

    ``layers`` maps ``"inputs"``/``"intermediates"`` to arrays of shape
    ``(L, n, cols)``; without it only nominal data is attached.
    """
    _stage1_pre(panel, k)
    layers = layers or {}
    n, m, D = panel.n, panel.m, panel.D
    b = ProgramBuilder(f"stage1/robust_ready/k={k}")
    b.var("w")
    _common_vars(b, n)
    a = [b.var(f"a[{i}]") for i in range(m)]
    bb = [b.var(f"b[{d}]") for d in range(D)]
    s_in = [b.var(f"s_in[{i}]") for i in range(m)]
    s_mid = [b.var(f"s_mid[{d}]") for d in range(D)]
    b.row("link", {"w": 1.0, "p": -1.0, **{v: -1.0 / D for v in bb}}, Relation.LE, 0.0)
    b.row("norm", {"p": 1.0, **{v: -1.0 / m for v in a}}, Relation.LE, 1.0)
    b.maximize({"w": 1.0})
    xs = _stack(panel.inputs, layers.get("inputs"))
    zs = _stack(panel.intermediates, layers.get("intermediates"))
    t = StageTemplate(b)
    for i in range(m):
        t.uncertain.append(UncertainRow(f"x[{i}]", "inputs", i, {s_in[i]: 1.0}, _input_like(xs, i, k)))
    for d in range(D):
        t.uncertain.append(UncertainRow(f"z[{d}]", "intermediates", d, {s_mid[d]: 1.0}, _output_like(zs, d, k)))
    for d in range(D):
        t.uncertain.append(UncertainRow(f"zb[{d}]", "intermediates", d, {s_mid[d]: -1.0}, _ratio(zs, d, k, bb[d])))
    for i in range(m):
        t.uncertain.append(UncertainRow(f"xa[{i}]", "inputs", i, {s_in[i]: -1.0}, _ratio(xs, i, k, a[i])))
    return t


def stage2_template(panel: DmuPanel, k: int, layers: dict[str, np.ndarray] | None = None,
                    undesirable: UndesirableTerm = UndesirableTerm.ADD) -> StageTemplate:
    """Second-stage RobustReady program; intermediates, desirable and undesirable rows are uncertain."""
    _stage2_pre(panel, k)
    layers = layers or {}
    n, D, s1, s2 = panel.n, panel.D, panel.s1, panel.s2
    b = ProgramBuilder(f"stage2/robust_ready/k={k}")
    b.var("w")
    _common_vars(b, n)
    bb = [b.var(f"b[{d}]") for d in range(D)]
    c_des = [b.var(f"c_des[{r}]") for r in range(s1)]
    c_und = [b.var(f"c_und[{r}]") for r in range(s2)]
    s_mid = [b.var(f"s_mid[{d}]") for d in range(D)]
    s_des = [b.var(f"s_des[{r}]") for r in range(s1)]
    s_und = [b.var(f"s_und[{r}]") for r in range(s2)]
    scale = 1.0 / (s1 + s2)
    link = {"w": 1.0, "p": -1.0, **{v: -scale for v in c_des},
            **{v: -scale * undesirable.sign for v in c_und}}
    b.row("link", link, Relation.LE, 0.0)
    b.row("norm", {"p": 1.0, **{v: -1.0 / D for v in bb}}, Relation.LE, 1.0)
    b.maximize({"w": 1.0})
    zs = _stack(panel.intermediates, layers.get("intermediates"))
    ys = _stack(panel.desirable, layers.get("desirable"))
    us = _stack(panel.undesirable, layers.get("undesirable"))
    t = StageTemplate(b)
    for d in range(D):
        t.uncertain.append(UncertainRow(f"z[{d}]", "intermediates", d, {s_mid[d]: 1.0}, _input_like(zs, d, k)))
    for r in range(s1):
        t.uncertain.append(UncertainRow(f"yd[{r}]", "desirable", r, {s_des[r]: 1.0}, _output_like(ys, r, k)))
    for r in range(s2):
        t.uncertain.append(UncertainRow(f"yu[{r}]", "undesirable", r, {s_und[r]: 1.0}, _input_like(us, r, k)))
    for d in range(D):
        t.uncertain.append(UncertainRow(f"zb[{d}]", "intermediates", d, {s_mid[d]: -1.0}, _ratio(zs, d, k, bb[d])))
    for r in range(s1):
        t.uncertain.append(UncertainRow(f"ydc[{r}]", "desirable", r, {s_des[r]: -1.0}, _ratio(ys, r, k, c_des[r])))
    for r in range(s2):
        t.uncertain.append(UncertainRow(f"yuc[{r}]", "undesirable", r, {s_und[r]: -1.0}, _ratio(us, r, k, c_und[r])))
    return t


def _stage1_pre(panel: DmuPanel, k: int) -> None:
    _check_k(panel, k)
    if panel.D < 1:
        raise ValueError("stage 1 needs at least one intermediate")
    _check_positive(("inputs", panel.inputs), ("intermediates", panel.intermediates))


def _stage2_pre(panel: DmuPanel, k: int) -> None:
    _check_k(panel, k)
    if panel.D < 1:
        raise ValueError("stage 2 needs at least one intermediate")
    if panel.s1 < 1:
        raise ValueError("stage 2 needs at least one desirable output")
    _check_positive(("intermediates", panel.intermediates), ("desirable", panel.desirable),
                    ("undesirable", panel.undesirable))


def build_stage1(panel: DmuPanel, k: int, form: Form | str = Form.EQUALITY) -> ConicProgram:
    """First-stage SBM (inputs -> intermediates) in one of three equivalent forms."""
    form = Form(form)
    if form is Form.ROBUST_READY:
        return stage1_template(panel, k).crisp()
    _stage1_pre(panel, k)
    x, z = panel.inputs, panel.intermediates
    b = ProgramBuilder(f"stage1/{form.value}/k={k}")
    _common_vars(b, panel.n)
    s_in = [b.var(f"s_in[{i}]") for i in range(panel.m)]
    s_mid = [b.var(f"s_mid[{d}]") for d in range(panel.D)]
    norm_rel = Relation.EQ if form is Form.EQUALITY else Relation.LE
    b.row("norm", {"p": 1.0, **_objective_ratio(x[k], s_in, 1.0 / panel.m, -1.0)}, norm_rel, 1.0)
    for i in range(panel.m):
        _balance(b, f"x[{i}]", x[:, i], k, s_in[i], -1.0)
    for d in range(panel.D):
        _balance(b, f"z[{d}]", z[:, d], k, s_mid[d], +1.0)
    b.maximize({"p": 1.0, **_objective_ratio(z[k], s_mid, 1.0 / panel.D)})
    return b.build()


def build_stage2(panel: DmuPanel, k: int, form: Form | str = Form.EQUALITY,
                 undesirable: UndesirableTerm | str = UndesirableTerm.ADD) -> ConicProgram:
    """Second-stage SBM (intermediates -> desirable and undesirable outputs)."""
    form = Form(form)
    undesirable = UndesirableTerm(undesirable)
    if form is Form.ROBUST_READY:
        return stage2_template(panel, k, undesirable=undesirable).crisp()
    _stage2_pre(panel, k)
    z, y, u = panel.intermediates, panel.desirable, panel.undesirable
    s = panel.s1 + panel.s2
    b = ProgramBuilder(f"stage2/{form.value}/k={k}")
    _common_vars(b, panel.n)
    s_mid = [b.var(f"s_mid[{d}]") for d in range(panel.D)]
    s_des = [b.var(f"s_des[{r}]") for r in range(panel.s1)]
    s_und = [b.var(f"s_und[{r}]") for r in range(panel.s2)]
    norm_rel = Relation.EQ if form is Form.EQUALITY else Relation.LE
    b.row("norm", {"p": 1.0, **_objective_ratio(z[k], s_mid, 1.0 / panel.D, -1.0)}, norm_rel, 1.0)
    for d in range(panel.D):
        _balance(b, f"z[{d}]", z[:, d], k, s_mid[d], -1.0)
    for r in range(panel.s1):
        _balance(b, f"yd[{r}]", y[:, r], k, s_des[r], +1.0)
    for r in range(panel.s2):
        _balance(b, f"yu[{r}]", u[:, r], k, s_und[r], -1.0)
    b.maximize({"p": 1.0, **_objective_ratio(y[k], s_des, 1.0 / s),
                **_objective_ratio(u[k], s_und, 1.0 / s, undesirable.sign)})
    return b.build()


# ---------------------------------------------------------------------------
# solutions


@dataclass(frozen=True)
class StageSolution:
    w: float
    efficiency: float
    classification: Classification
    p: float
    slacks: dict[str, float]
    lambdas: dict[str, float]
    warnings: tuple[str, ...] = ()

    @property
    def efficient(self) -> bool:
        return self.classification is Classification.EFFICIENT


_SLACK_PREFIXES = ("s_in[", "s_mid[", "s_des[", "s_und[")


def extract_solution(outcome: SolveOutcome, program: ConicProgram, tol_eff: float = TOL_EFF) -> StageSolution:
    """Read ``w``, efficiency, slacks and intensities off an optimal outcome.

    Raises :class:`StageFailed` for non-optimal outcomes, a collapsed ``p``,
    or ``w`` below one by more than ``tol_eff``. A ``w`` just under one is
    solver noise: the efficiency is clamped to 1 and a warning recorded.
    """
    if outcome.status is not Status.OPTIMAL or outcome.assignment is None:
        raise StageFailed(program.name, outcome.status, outcome.message)
    values = outcome.assignment
    p = values["p"]
    if p < P_FLOOR_CHECK:
        raise StageFailed(program.name, Status.NUMERICAL_FAILURE, f"homogeniser p collapsed to {p:.3g}")
    w = float(outcome.objective)
    warnings: list[str] = []
    if w < 1.0:
        if 1.0 - w > tol_eff:
            raise StageFailed(program.name, Status.NUMERICAL_FAILURE, f"optimum w = {w!r} below 1")
        if 1.0 - w > W_NOISE:
            msg = f"{program.name}: w = {w!r} below 1 within tolerance; efficiency clamped to 1"
            log.warning(msg)
            warnings.append(msg)
        eff = 1.0
    else:
        eff = 1.0 / w
    cls = Classification.EFFICIENT if abs(eff - 1.0) <= tol_eff else Classification.INEFFICIENT
    slacks = {k: v for k, v in values.items() if k.startswith(_SLACK_PREFIXES)}
    lambdas = {k: v for k, v in values.items() if k.startswith("lam[")}
    return StageSolution(w, eff, cls, p, slacks, lambdas, tuple(warnings))


def overall_efficiency(stage1: StageSolution, stage2: StageSolution) -> float:
    return stage1.efficiency * stage2.efficiency


def overall_efficient(stage1: StageSolution, stage2: StageSolution) -> bool:
    return stage1.efficient and stage2.efficient
