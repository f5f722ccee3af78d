"""Batch runner: config loading, the DMU x family x stage solve grid, Friedman test, reports."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml
from scipy import stats

from .conic_ir import SolverParams, Status, solve
from .panel import DmuPanel, Imputer, PanelError, load_panel_file, preprocess, schema_from_mapping, load_schema
from .robust import (BudgetSpec, DeviationLayers, EllipsoidalSpec, PercentOfNominal, PolyhedralSet,
                     PolyhedralSpec, UncertaintyError, build_robust_stage1_budget,
                     build_robust_stage1_ellipsoidal, build_robust_stage1_polyhedral,
                     build_robust_stage2_budget, build_robust_stage2_ellipsoidal,
                     build_robust_stage2_polyhedral, make_layers)
from .sbm import (TOL_EFF, Form, StageFailed, UndesirableTerm, build_stage1, build_stage2,
                  extract_solution)

log = logging.getLogger(__name__)

FAMILIES = ("crisp", "ellipsoidal", "polyhedral", "budget")
STAGES = ("stage1", "stage2")
COLUMNS = ("stage1", "stage2", "overall")
UNCERTAIN_FAMILIES = ("inputs", "intermediates", "desirable", "undesirable")


class ConfigError(ValueError):
    pass


class FamilyAbort(RuntimeError):
    def __init__(self, family: str, stage: str, detail: str):
        super().__init__(f"family {family}: every DMU failed in {stage} ({detail})")
        self.family = family
        self.stage = stage


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True, eq=False)
class RunConfig:
    panel_path: Path
    schema: Any
    imputer: Imputer = Imputer.COLUMN_MEAN
    eps_shift: float = 1.0
    predictors: Mapping[str, str] | None = None
    families: tuple[str, ...] = FAMILIES
    layer_fractions: tuple[float, ...] = (0.1, 0.2)
    ellipsoidal: EllipsoidalSpec = field(default_factory=lambda: EllipsoidalSpec.uniform(1.0))
    polyhedral: PolyhedralSpec | None = None
    budget: BudgetSpec = field(default_factory=lambda: BudgetSpec.uniform(1.0))
    solver: SolverParams = field(default_factory=SolverParams)
    tol_eff: float = TOL_EFF
    undesirable: UndesirableTerm = UndesirableTerm.ADD
    output_dir: Path = Path("out")
    parallelism: int = 1
    friedman_column: str = "overall"

    def __post_init__(self) -> None:
        if not self.families:
            raise ConfigError("at least one model family must be selected")
        bad = [f for f in self.families if f not in FAMILIES]
        if bad:
            raise ConfigError(f"unknown families {bad}; expected a subset of {list(FAMILIES)}")
        if len(set(self.families)) != len(self.families):
            raise ConfigError("families listed twice")
        if self.friedman_column not in COLUMNS:
            raise ConfigError(f"friedman column must be one of {list(COLUMNS)}")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be at least 1")
        if not self.panel_path.is_file():
            raise ConfigError(f"panel file not found: {self.panel_path}")

    @property
    def ordered_families(self) -> tuple[str, ...]:
        return tuple(f for f in FAMILIES if f in self.families)


def _mapping(raw: Any, where: str) -> Mapping:
    if raw is None:
        return {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{where} must be a mapping")
    return raw


def _per_family(raw: Any, key: str, where: str) -> dict[str, Any]:
    """Either ``{key: value}`` for every family or ``{family: value, ...}``."""
    raw = _mapping(raw, where)
    if key in raw:
        extra = set(raw) - {key}
        if extra:
            raise ConfigError(f"{where}: {sorted(extra)} not allowed next to {key!r}")
        return {f: raw[key] for f in UNCERTAIN_FAMILIES}
    extra = set(raw) - set(UNCERTAIN_FAMILIES)
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    return dict(raw)


def _polyhedral_set(raw: Any, L: int, where: str) -> PolyhedralSet:
    raw = _mapping(raw, where)
    if "box" in raw:
        return PolyhedralSet.box(L, float(raw["box"]))
    if "H" in raw and "q" in raw:
        return PolyhedralSet(np.asarray(raw["H"], dtype=float), np.asarray(raw["q"], dtype=float))
    raise ConfigError(f"{where} needs either 'box' or both 'H' and 'q'")


def _polyhedral_spec(raw: Any, L: int) -> PolyhedralSpec | None:
    if raw is None:
        return None
    raw = _mapping(raw, "uncertainty.polyhedral")
    if "box" in raw or "H" in raw:
        s = _polyhedral_set(raw, L, "uncertainty.polyhedral")
        return PolyhedralSpec.uniform(s)
    fams = _per_family(raw, "__none__", "uncertainty.polyhedral")
    return PolyhedralSpec(**{f: _polyhedral_set(v, L, f"uncertainty.polyhedral.{f}") for f, v in fams.items()})


def config_from_mapping(raw: Mapping, base_dir: Path) -> RunConfig:
    """Build a :class:`RunConfig`; relative paths are taken from ``base_dir``."""
    try:
        raw = _mapping(raw, "config")
        panel_raw = _mapping(raw.get("panel"), "panel")
        if "path" not in panel_raw:
            raise ConfigError("panel.path is required")
        panel_path = (base_dir / str(panel_raw["path"]))
        if "schema" in panel_raw:
            schema = load_schema(base_dir / str(panel_raw["schema"]))
        else:
            schema = schema_from_mapping(panel_raw)
        pre = _mapping(raw.get("preprocess"), "preprocess")
        unc = _mapping(raw.get("uncertainty"), "uncertainty")
        layers = _mapping(unc.get("layers"), "uncertainty.layers")
        fractions = tuple(float(f) for f in layers.get("percent_of_nominal", (0.1, 0.2)))
        L = len(fractions)
        ell = _per_family(unc.get("ellipsoidal", {"omega": 1.0}), "omega", "uncertainty.ellipsoidal")
        bud = _per_family(unc.get("budget", {"gamma": 1.0}), "gamma", "uncertainty.budget")
        poly_raw = unc.get("polyhedral", {"box": 1.0})
        solver = _mapping(raw.get("solver"), "solver")
        out = _mapping(raw.get("output"), "output")
        friedman = _mapping(raw.get("friedman"), "friedman")
        families = raw.get("families", list(FAMILIES))
        if isinstance(families, str):
            families = [families]
        return RunConfig(
            panel_path=panel_path,
            schema=schema,
            imputer=Imputer(pre.get("imputer", "column_mean")),
            eps_shift=float(pre.get("eps_shift", 1.0)),
            predictors=pre.get("predictors"),
            families=tuple(str(f).lower() for f in families),
            layer_fractions=fractions,
            ellipsoidal=EllipsoidalSpec(**ell),
            polyhedral=_polyhedral_spec(poly_raw, L),
            budget=BudgetSpec(**bud),
            solver=SolverParams(**solver),
            tol_eff=float(raw.get("tol_eff", TOL_EFF)),
            undesirable=UndesirableTerm(raw.get("undesirable_term", "add")),
            output_dir=base_dir / str(out.get("dir", "out")),
            parallelism=int(raw.get("parallelism", 1)),
            friedman_column=str(friedman.get("column", "overall")),
        )
    except ConfigError:
        raise
    except (PanelError, UncertaintyError, ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return config_from_mapping(raw, path.parent)


@dataclass(frozen=True, eq=False)
class Prepared:
    panel: DmuPanel
    layers: DeviationLayers


def prepare(config: RunConfig) -> Prepared:
    """Load, impute and shift the panel, then build layers and check every spec against them."""
    try:
        raw = load_panel_file(config.panel_path, config.schema)
        panel, _ = preprocess(raw, config.imputer, config.eps_shift, config.predictors)
        layers = make_layers(panel, PercentOfNominal(config.layer_fractions))
        robust = [f for f in config.families if f != "crisp"]
        if robust and layers.L < 1:
            raise ConfigError("robust families need at least one deviation layer")
        if "ellipsoidal" in robust:
            for f in UNCERTAIN_FAMILIES:
                config.ellipsoidal.radii(f, panel.matrix(f).shape[1])
        if "budget" in robust:
            for f in UNCERTAIN_FAMILIES:
                config.budget.budgets(f, panel.matrix(f).shape[1], layers.L)
        if "polyhedral" in robust:
            if config.polyhedral is None:
                raise ConfigError("polyhedral family selected without an uncertainty.polyhedral set")
            for f in UNCERTAIN_FAMILIES:
                s = config.polyhedral.for_family(f)
                if s is not None:
                    s.check(layers.L, f"polyhedral set for {f}")
        if panel.D < 1 or panel.s1 < 1:
            raise ConfigError("the two-stage models need at least one intermediate and one desirable output")
    except (PanelError, UncertaintyError) as exc:
        raise ConfigError(str(exc)) from exc
    return Prepared(panel, layers)


# ---------------------------------------------------------------------------
# solve grid


@dataclass(frozen=True)
class StageRecord:
    status: str
    w: float | None = None
    efficiency: float | None = None
    classification: str | None = None
    slacks: Mapping[str, float] = field(default_factory=dict)
    lambdas: Mapping[str, float] = field(default_factory=dict)
    warnings: tuple[str, ...] = ()
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.efficiency is not None

    def to_dict(self) -> dict:
        return {"status": self.status, "w": self.w, "efficiency": self.efficiency,
                "classification": self.classification, "slacks": dict(self.slacks),
                "lambdas": dict(self.lambdas), "warnings": list(self.warnings), "message": self.message}

    @classmethod
    def from_dict(cls, d: Mapping) -> "StageRecord":
        return cls(d["status"], d["w"], d["efficiency"], d["classification"], dict(d["slacks"]),
                   dict(d["lambdas"]), tuple(d["warnings"]), d["message"])


@dataclass(frozen=True)
class Cell:
    dmu: str
    family: str
    stage1: StageRecord
    stage2: StageRecord

    @property
    def overall(self) -> float | None:
        if self.stage1.ok and self.stage2.ok:
            return self.stage1.efficiency * self.stage2.efficiency
        return None

    @property
    def overall_efficient(self) -> bool | None:
        if self.overall is None:
            return None
        return self.stage1.classification == "efficient" and self.stage2.classification == "efficient"

    def value(self, column: str) -> float | None:
        if column == "overall":
            return self.overall
        return getattr(self, column).efficiency

    def to_dict(self) -> dict:
        return {"dmu": self.dmu, "family": self.family, "stage1": self.stage1.to_dict(),
                "stage2": self.stage2.to_dict(), "overall": self.overall,
                "overall_efficient": self.overall_efficient}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Cell":
        return cls(d["dmu"], d["family"], StageRecord.from_dict(d["stage1"]), StageRecord.from_dict(d["stage2"]))


@dataclass(frozen=True)
class FriedmanResult:
    statistic: float
    df: int
    p_value: float
    n: int
    families: tuple[str, ...]
    column: str = "overall"

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "df": self.df, "p_value": self.p_value, "n": self.n,
                "families": list(self.families), "column": self.column}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FriedmanResult":
        return cls(d["statistic"], d["df"], d["p_value"], d["n"], tuple(d["families"]), d["column"])

    def summary(self) -> str:
        return (f"Friedman ({self.column}; {', '.join(self.families)}; n={self.n}): "
                f"statistic={self.statistic:.6f} df={self.df} p={format_p_value(self.p_value)}")


@dataclass(frozen=True)
class EfficiencyReport:
    dmus: tuple[str, ...]
    families: tuple[str, ...]
    cells: tuple[Cell, ...]
    friedman: FriedmanResult | None
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def cell(self, dmu: str, family: str) -> Cell:
        for c in self.cells:
            if c.dmu == dmu and c.family == family:
                return c
        raise KeyError((dmu, family))

    def column(self, family: str, column: str) -> list[float | None]:
        return [self.cell(d, family).value(column) for d in self.dmus]

    def lowest(self) -> dict[str, dict[str, str | None]]:
        """Lowest-efficiency DMU per family and column, over non-failed DMUs (first index on ties)."""
        out: dict[str, dict[str, str | None]] = {}
        for f in self.families:
            out[f] = {}
            for col in COLUMNS:
                vals = [(v, i) for i, v in enumerate(self.column(f, col)) if v is not None]
                out[f][col] = self.dmus[min(vals)[1]] if vals else None
        return out

    def to_dict(self) -> dict:
        return {"dmus": list(self.dmus), "families": list(self.families),
                "cells": [c.to_dict() for c in self.cells],
                "lowest": self.lowest(),
                "friedman": None if self.friedman is None else self.friedman.to_dict(),
                "metadata": dict(self.metadata)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "EfficiencyReport":
        fr = d.get("friedman")
        return cls(tuple(d["dmus"]), tuple(d["families"]), tuple(Cell.from_dict(c) for c in d["cells"]),
                   None if fr is None else FriedmanResult.from_dict(fr), dict(d.get("metadata", {})))


_BUILDERS = {
    ("ellipsoidal", 1): build_robust_stage1_ellipsoidal,
    ("ellipsoidal", 2): build_robust_stage2_ellipsoidal,
    ("polyhedral", 1): build_robust_stage1_polyhedral,
    ("polyhedral", 2): build_robust_stage2_polyhedral,
    ("budget", 1): build_robust_stage1_budget,
    ("budget", 2): build_robust_stage2_budget,
}


@dataclass(frozen=True, eq=False)
class _Context:
    panel: DmuPanel
    layers: DeviationLayers
    ellipsoidal: EllipsoidalSpec
    polyhedral: PolyhedralSpec | None
    budget: BudgetSpec
    solver: SolverParams
    tol_eff: float
    undesirable: UndesirableTerm


def _build(ctx: _Context, family: str, stage: int, k: int):
    if family == "crisp":
        if stage == 1:
            return build_stage1(ctx.panel, k, Form.ROBUST_READY)
        return build_stage2(ctx.panel, k, Form.ROBUST_READY, ctx.undesirable)
    spec = getattr(ctx, family)
    builder = _BUILDERS[(family, stage)]
    if stage == 1:
        return builder(ctx.panel, k, ctx.layers, spec)
    return builder(ctx.panel, k, ctx.layers, spec, ctx.undesirable)


def solve_task(ctx: _Context, family: str, stage: int, k: int) -> StageRecord:
    """Build and solve one stage program; failures come back as records, never raise."""
    program = _build(ctx, family, stage, k)
    outcome = solve(program, ctx.solver)
    try:
        sol = extract_solution(outcome, program, ctx.tol_eff)
    except StageFailed as exc:
        status = exc.status.value if isinstance(exc.status, Status) else str(exc.status)
        return StageRecord(status, message=str(exc))
    return StageRecord(outcome.status.value, sol.w, sol.efficiency, sol.classification.value,
                       sol.slacks, sol.lambdas, sol.warnings)


_WORKER_CTX: _Context | None = None


def _init_worker(ctx: _Context) -> None:
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _worker(task: tuple[str, int, int]) -> StageRecord:
    assert _WORKER_CTX is not None
    return solve_task(_WORKER_CTX, *task)


def run_batch(config: RunConfig, prepared: Prepared | None = None) -> EfficiencyReport:
    prepared = prepared or prepare(config)
    panel = prepared.panel
    ctx = _Context(panel, prepared.layers, config.ellipsoidal, config.polyhedral, config.budget,
                   config.solver, config.tol_eff, config.undesirable)
    families = config.ordered_families
    tasks = [(f, s, k) for f in families for s in (1, 2) for k in range(panel.n)]
    if config.parallelism == 1:
        results = [solve_task(ctx, *t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=config.parallelism, initializer=_init_worker,
                                 initargs=(ctx,)) as pool:
            results = list(pool.map(_worker, tasks, chunksize=max(1, len(tasks) // (4 * config.parallelism))))
    by_task = dict(zip(tasks, results))
    for (f, s, k), rec in by_task.items():
        if not rec.ok:
            log.warning("%s stage%d failed for %s: %s", f, s, panel.names[k], rec.message)

    for f in families:
        for s in (1, 2):
            recs = [by_task[(f, s, k)] for k in range(panel.n)]
            if not any(r.ok for r in recs):
                raise FamilyAbort(f, f"stage{s}", recs[0].message)

    cells = tuple(Cell(panel.names[k], f, by_task[(f, 1, k)], by_task[(f, 2, k)])
                  for k in range(panel.n) for f in families)
    report = EfficiencyReport(panel.names, families, cells, None, {
        "panel_notes": list(panel.notes),
        "layers": prepared.layers.generator,
        "undesirable_term": config.undesirable.value,
        "tol_eff": config.tol_eff,
    })
    fr = report_friedman(report, families, config.friedman_column)
    return EfficiencyReport(report.dmus, report.families, report.cells, fr, report.metadata)


# ---------------------------------------------------------------------------
# Friedman rank test


def friedman_test(matrix: np.ndarray) -> tuple[float, int, float]:
    """Friedman chi-square over an ``n x c`` matrix (blocks in rows), average ranks on ties.

    Returns ``(statistic, df, p_value)``. No tie correction is applied.
    """
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2:
        raise ValueError("friedman_test expects a 2-D matrix")
    n, c = a.shape
    if c < 2:
        raise ValueError("friedman_test needs at least two families")
    if n < 2:
        raise ValueError("friedman_test needs at least two DMUs")
    if not np.isfinite(a).all():
        raise ValueError("friedman_test needs a complete matrix")
    ranks = np.apply_along_axis(stats.rankdata, 1, a)
    R = ranks.sum(axis=0)
    chi2 = 12.0 / (n * c * (c + 1)) * float(np.sum(R ** 2)) - 3.0 * n * (c + 1)
    if abs(chi2) < 1e-12:  # all ranks tied up to rounding
        chi2 = 0.0
    df = c - 1
    return chi2, df, float(stats.chi2.sf(chi2, df))


def report_friedman(report: EfficiencyReport, families: Sequence[str], column: str = "overall"
                    ) -> FriedmanResult | None:
    """Friedman over DMUs complete in every compared family; ``None`` when the test cannot run."""
    families = tuple(families)
    unknown = [f for f in families if f not in report.families]
    if unknown:
        raise ValueError(f"families {unknown} are not in the report")
    if column not in COLUMNS:
        raise ValueError(f"column must be one of {list(COLUMNS)}")
    cols = [report.column(f, column) for f in families]
    rows = [[c[i] for c in cols] for i in range(len(report.dmus))]
    complete = [r for r in rows if all(v is not None for v in r)]
    if len(families) < 2 or len(complete) < 2:
        return None
    stat, df, p = friedman_test(np.array(complete))
    return FriedmanResult(stat, df, p, len(complete), families, column)


def format_p_value(p: float) -> str:
    return "<1e-06" if p < 1e-6 else f"{p:.6f}"


# ---------------------------------------------------------------------------
# output


def csv_header() -> list[str]:
    return ["dmu"] + [f"{col}_{f}" for col in COLUMNS for f in FAMILIES]


def _fmt(report: EfficiencyReport, dmu: str, family: str, column: str) -> str:
    if family not in report.families:
        return ""
    v = report.cell(dmu, family).value(column)
    return "NA" if v is None else f"{v:.6f}"


def report_csv(report: EfficiencyReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header())
    for d in report.dmus:
        w.writerow([d] + [_fmt(report, d, f, col) for col in COLUMNS for f in FAMILIES])
    return buf.getvalue()


def report_json(report: EfficiencyReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n"


def parse_report_json(text: str) -> EfficiencyReport:
    return EfficiencyReport.from_dict(json.loads(text))


def emit_report(report: EfficiencyReport, out_dir: str | Path, formats: Sequence[str] = ("csv", "json")
                ) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt == "csv":
            path, text = out_dir / "report.csv", report_csv(report)
        elif fmt == "json":
            path, text = out_dir / "report.json", report_json(report)
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        written.append(path)
    return written
