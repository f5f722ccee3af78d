"""Robust counterparts of the two-stage SBM under ellipsoidal, polyhedral and budget sets.

Each uncertain row ``f(v) <= 0`` is affine in the data ``v = v0 + sum_l zeta_l v^l``,
so it splits into a nominal part and one coefficient vector ``g_l`` per deviation
layer. Uncertainty is constraint-wise: every row gets its own ``zeta`` and the
worst case over the set is replaced by the dual of the inner maximisation.

=============  =========================================  ===========================
set            zeta                                        protection term
=============  =========================================  ===========================
ellipsoidal    ``||zeta||_2 <= Omega``                     ``Omega * ||g||_2``
polyhedral     ``H zeta + q >= 0``                         ``min q.nu, H^T nu = -g, nu >= 0``
budget         ``|zeta_l| <= 1, ||zeta||_1 <= Gamma``      ``Gamma*kappa + sum mu, kappa + mu_l >= |g_l|``
=============  =========================================  ===========================
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np
from scipy.optimize import linprog

from .conic_ir import AffineExpr, ConicProgram, ProgramBuilder, Relation
from .panel import DmuPanel
from .sbm import StageTemplate, UncertainRow, UndesirableTerm, stage1_template, stage2_template

STAGE1_FAMILIES = ("inputs", "intermediates")
STAGE2_FAMILIES = ("intermediates", "desirable", "undesirable")


class UncertaintyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# deviation layers


@dataclass(frozen=True)
class PercentOfNominal:
    fractions: tuple[float, ...]

    def __init__(self, fractions: Sequence[float]):
        object.__setattr__(self, "fractions", tuple(float(f) for f in fractions))

    def describe(self) -> str:
        return "percent_of_nominal(" + ", ".join(repr(f) for f in self.fractions) + ")"


@dataclass(frozen=True)
class ExplicitTable:
    """Layer values given directly: ``tables[matrix]`` has shape ``(L, n, cols)``."""

    tables: Mapping[str, np.ndarray]

    def describe(self) -> str:
        return "explicit_table"


Generator = Union[PercentOfNominal, ExplicitTable]


@dataclass(frozen=True, eq=False)
class DeviationLayers:
    """Per-datum deviation components ``v^l`` (l = 1..L) for every panel matrix."""

    L: int
    values: Mapping[str, np.ndarray]
    generator: str

    def __getitem__(self, key: str) -> np.ndarray:
        return self.values[key]

    def for_family(self, families: Sequence[str]) -> dict[str, np.ndarray]:
        return {f: self.values[f] for f in families}


def make_layers(panel: DmuPanel, generator: Generator) -> DeviationLayers:
    """Populate deviation layers for every cell of every matrix."""
    values: dict[str, np.ndarray] = {}
    if isinstance(generator, PercentOfNominal):
        fr = np.asarray(generator.fractions, dtype=float)
        if not np.isfinite(fr).all():
            raise UncertaintyError("layer fractions must be finite")
        for key, mat in panel.matrices().items():
            values[key] = fr[:, None, None] * mat[None, :, :]
        L = len(fr)
    elif isinstance(generator, ExplicitTable):
        L = None
        for key, mat in panel.matrices().items():
            if mat.shape[1] == 0:
                continue
            if key not in generator.tables:
                raise UncertaintyError(f"explicit layer table has no entry for {key}")
            arr = np.asarray(generator.tables[key], dtype=float)
            if arr.ndim != 3 or arr.shape[1:] != mat.shape:
                raise UncertaintyError(f"layer table for {key} must have shape (L, {mat.shape[0]}, {mat.shape[1]})")
            if np.isnan(arr).any():
                raise UncertaintyError(f"layer table for {key} has missing cells")
            if not np.isfinite(arr).all():
                raise UncertaintyError(f"layer table for {key} has non-finite values")
            if L is None:
                L = arr.shape[0]
            elif arr.shape[0] != L:
                raise UncertaintyError("all layer tables must share the same L")
            values[key] = arr
        L = L or 0
        for key, mat in panel.matrices().items():
            values.setdefault(key, np.zeros((L, *mat.shape)))
    else:
        raise TypeError(f"unsupported generator {generator!r}")
    for arr in values.values():
        arr.setflags(write=False)
    return DeviationLayers(L, values, generator.describe())


# ---------------------------------------------------------------------------
# uncertainty specifications

Radius = Union[float, Sequence[float]]


def _per_row(value: Radius | None, count: int, what: str) -> np.ndarray:
    if value is None:
        return np.zeros(count)
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.size == 1:
        arr = np.full(count, float(arr[0]))
    if arr.shape != (count,):
        raise UncertaintyError(f"{what}: expected 1 or {count} values, got {arr.size}")
    if not np.isfinite(arr).all() or (arr < 0).any():
        raise UncertaintyError(f"{what}: values must be finite and nonnegative")
    return arr


@dataclass(frozen=True)
class EllipsoidalSpec:
    """Radius ``Omega`` per family, either one value or one per row of the family."""

    inputs: Radius = 0.0
    intermediates: Radius = 0.0
    desirable: Radius = 0.0
    undesirable: Radius = 0.0

    @classmethod
    def uniform(cls, omega: float) -> "EllipsoidalSpec":
        return cls(omega, omega, omega, omega)

    def radii(self, family: str, count: int) -> np.ndarray:
        return _per_row(getattr(self, family), count, f"ellipsoidal radius for {family}")


@dataclass(frozen=True, eq=False)
class PolyhedralSet:
    """``{zeta : H zeta + q >= 0}`` with ``H`` of shape ``(K, L)``."""

    H: np.ndarray
    q: np.ndarray

    def __post_init__(self) -> None:
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        q = np.asarray(self.q, dtype=float).reshape(-1)
        if H.shape[0] != q.shape[0]:
            raise UncertaintyError(f"H has {H.shape[0]} rows but q has {q.shape[0]} entries")
        if H.shape[0] < 1:
            raise UncertaintyError("a polyhedral set needs at least one inequality")
        if not (np.isfinite(H).all() and np.isfinite(q).all()):
            raise UncertaintyError("H and q must be finite")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "q", q)

    @property
    def K(self) -> int:
        return self.H.shape[0]

    @property
    def L(self) -> int:
        return self.H.shape[1]

    @classmethod
    def box(cls, L: int, delta: float) -> "PolyhedralSet":
        """``|zeta_l| <= delta`` for every layer."""
        eye = np.eye(L)
        return cls(np.vstack([eye, -eye]), np.full(2 * L, float(delta)))

    def contains(self, zeta: np.ndarray, tol: float = 1e-12) -> bool:
        return bool((self.H @ zeta + self.q >= -tol).all())

    def check(self, L: int, where: str) -> None:
        if self.L != L:
            raise UncertaintyError(f"{where}: H has {self.L} columns but there are {L} deviation layers")
        if not self.H.any():
            raise UncertaintyError(f"{where}: H is the zero matrix, so the set is vacuous")
        res = linprog(np.zeros(L), A_ub=-self.H, b_ub=self.q, bounds=[(None, None)] * L, method="highs")
        if res.status == 2:
            raise UncertaintyError(f"{where}: the set {{zeta : H zeta + q >= 0}} is empty")


@dataclass(frozen=True)
class PolyhedralSpec:
    """One polyhedral set per family; every row in the family shares it."""

    inputs: PolyhedralSet | None = None
    intermediates: PolyhedralSet | None = None
    desirable: PolyhedralSet | None = None
    undesirable: PolyhedralSet | None = None

    @classmethod
    def uniform(cls, s: PolyhedralSet) -> "PolyhedralSpec":
        return cls(s, s, s, s)

    def for_family(self, family: str) -> PolyhedralSet | None:
        return getattr(self, family)


@dataclass(frozen=True)
class BudgetSpec:
    """Budget ``Gamma`` per family (``||zeta||_1 <= Gamma`` on ``[-1, 1]^L``)."""

    inputs: Radius = 0.0
    intermediates: Radius = 0.0
    desirable: Radius = 0.0
    undesirable: Radius = 0.0

    @classmethod
    def uniform(cls, gamma: float) -> "BudgetSpec":
        return cls(gamma, gamma, gamma, gamma)

    def budgets(self, family: str, count: int, L: int) -> np.ndarray:
        raw = np.atleast_1d(np.asarray(getattr(self, family), dtype=float))
        if (raw < 0).any():
            raise UncertaintyError(f"budget for {family} is negative")
        arr = _per_row(raw, count, f"budget for {family}")
        if (arr > L).any():
            raise UncertaintyError(f"budget for {family} exceeds the number of layers L = {L}")
        return arr


def interval_budget_scale(deviation: np.ndarray, half_width: np.ndarray) -> np.ndarray:
    """Scaled deviations ``(a - a0) / a_hat`` of the interval (cardinality) budget form.

    Calibration helper only: the counterparts work in layer space.
    """
    half_width = np.asarray(half_width, dtype=float)
    return np.divide(deviation, half_width, out=np.zeros_like(np.asarray(deviation, dtype=float)),
                     where=half_width != 0)


# ---------------------------------------------------------------------------
# counterpart construction


def _require_layers(layers: DeviationLayers) -> None:
    if layers.L < 1:
        raise UncertaintyError("robust counterparts need at least one deviation layer (L = 0)")


def _family_count(panel: DmuPanel, family: str) -> int:
    return panel.matrix(family).shape[1]


def _layer_exprs(row: UncertainRow) -> list[AffineExpr]:
    return [AffineExpr.of(g) for g in row.layers()]


def _protect_ellipsoidal(b: ProgramBuilder, row: UncertainRow, omega: float) -> None:
    # ||Omega g|| <= -(nominal row); a zero radius or certain data leaves the linear row
    if omega == 0.0 or not any(c != 0.0 for g in row.layers() for c in g.values()):
        b.row(row.name, row.nominal, Relation.LE, 0.0)
        return
    members = [AffineExpr.of({v: omega * c for v, c in g.items()}) for g in row.layers()]
    bound = AffineExpr.of({v: -c for v, c in row.nominal.items()})
    b.soc(f"ell:{row.name}", members, bound)


def _protect_polyhedral(b: ProgramBuilder, row: UncertainRow, pset: PolyhedralSet) -> None:
    nu = [b.var(f"nu:{row.name}:{kk}") for kk in range(pset.K)]
    main = dict(row.nominal)
    for kk, v in enumerate(nu):
        main[v] = main.get(v, 0.0) + pset.q[kk]
    b.row(row.name, main, Relation.LE, 0.0)
    for ell, g in enumerate(row.layers()):
        coeffs = dict(g)
        for kk, v in enumerate(nu):
            if pset.H[kk, ell] != 0.0:
                coeffs[v] = coeffs.get(v, 0.0) + pset.H[kk, ell]
        b.row(f"{row.name}:dual{ell + 1}", coeffs, Relation.EQ, 0.0)


def _protect_budget(b: ProgramBuilder, row: UncertainRow, gamma: float) -> None:
    kappa = b.var(f"kappa:{row.name}")
    mu = [b.var(f"mu:{row.name}:{ell + 1}") for ell in range(len(row.layers()))]
    main = dict(row.nominal)
    main[kappa] = main.get(kappa, 0.0) + gamma
    for v in mu:
        main[v] = 1.0
    b.row(row.name, main, Relation.LE, 0.0)
    for ell, g in enumerate(row.layers()):
        up = {kappa: 1.0, mu[ell]: 1.0}
        down = {kappa: 1.0, mu[ell]: 1.0}
        for v, c in g.items():
            up[v] = up.get(v, 0.0) - c
            down[v] = down.get(v, 0.0) + c
        b.row(f"{row.name}:sup{ell + 1}+", up, Relation.GE, 0.0)
        b.row(f"{row.name}:sup{ell + 1}-", down, Relation.GE, 0.0)


def _rename(template: StageTemplate, kind: str) -> None:
    stage, _, rest = template.builder.name.partition("/robust_ready/")
    template.builder.name = f"{stage}/{kind}/{rest}"


def _stage_template(panel: DmuPanel, k: int, layers: DeviationLayers, stage: int,
                    undesirable: UndesirableTerm) -> tuple[StageTemplate, tuple[str, ...]]:
    _require_layers(layers)
    if stage == 1:
        fams = STAGE1_FAMILIES
        return stage1_template(panel, k, layers.for_family(fams)), fams
    fams = STAGE2_FAMILIES
    return stage2_template(panel, k, layers.for_family(fams), UndesirableTerm(undesirable)), fams


def _ellipsoidal(panel, k, layers, spec: EllipsoidalSpec, stage, undesirable) -> ConicProgram:
    t, fams = _stage_template(panel, k, layers, stage, undesirable)
    _rename(t, "ellipsoidal")
    radii = {f: spec.radii(f, _family_count(panel, f)) for f in fams}
    for row in t.uncertain:
        _protect_ellipsoidal(t.builder, row, float(radii[row.family][row.index]))
    return t.builder.build()


def _polyhedral(panel, k, layers, spec: PolyhedralSpec, stage, undesirable) -> ConicProgram:
    t, fams = _stage_template(panel, k, layers, stage, undesirable)
    _rename(t, "polyhedral")
    sets: dict[str, PolyhedralSet | None] = {}
    for f in fams:
        pset = spec.for_family(f)
        if pset is None:
            if _family_count(panel, f) and np.any(layers[f]):
                raise UncertaintyError(f"no polyhedral set for {f}, which has nonzero deviation layers")
        else:
            pset.check(layers.L, f"polyhedral set for {f}")
        sets[f] = pset
    for row in t.uncertain:
        pset = sets[row.family]
        if pset is None:
            t.builder.row(row.name, row.nominal, Relation.LE, 0.0)
        else:
            _protect_polyhedral(t.builder, row, pset)
    return t.builder.build()


def _budget(panel, k, layers, spec: BudgetSpec, stage, undesirable) -> ConicProgram:
    t, fams = _stage_template(panel, k, layers, stage, undesirable)
    _rename(t, "budget")
    gammas = {f: spec.budgets(f, _family_count(panel, f), layers.L) for f in fams}
    for row in t.uncertain:
        _protect_budget(t.builder, row, float(gammas[row.family][row.index]))
    return t.builder.build()


def build_robust_stage1_ellipsoidal(panel: DmuPanel, k: int, layers: DeviationLayers,
                                    spec: EllipsoidalSpec) -> ConicProgram:
    """First stage with inputs and intermediates in per-row ellipsoids (an SOCP)."""
    return _ellipsoidal(panel, k, layers, spec, 1, UndesirableTerm.ADD)


def build_robust_stage2_ellipsoidal(panel: DmuPanel, k: int, layers: DeviationLayers,
                                    spec: EllipsoidalSpec,
                                    undesirable: UndesirableTerm = UndesirableTerm.ADD) -> ConicProgram:
    return _ellipsoidal(panel, k, layers, spec, 2, undesirable)


def build_robust_stage1_polyhedral(panel: DmuPanel, k: int, layers: DeviationLayers,
                                   spec: PolyhedralSpec) -> ConicProgram:
    return _polyhedral(panel, k, layers, spec, 1, UndesirableTerm.ADD)


def build_robust_stage2_polyhedral(panel: DmuPanel, k: int, layers: DeviationLayers,
                                   spec: PolyhedralSpec,
                                   undesirable: UndesirableTerm = UndesirableTerm.ADD) -> ConicProgram:
    return _polyhedral(panel, k, layers, spec, 2, undesirable)


def build_robust_stage1_budget(panel: DmuPanel, k: int, layers: DeviationLayers,
                               spec: BudgetSpec) -> ConicProgram:
    return _budget(panel, k, layers, spec, 1, UndesirableTerm.ADD)


def build_robust_stage2_budget(panel: DmuPanel, k: int, layers: DeviationLayers,
                               spec: BudgetSpec,
                               undesirable: UndesirableTerm = UndesirableTerm.ADD) -> ConicProgram:
    return _budget(panel, k, layers, spec, 2, undesirable)
