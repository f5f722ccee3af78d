"""DMU panels: loading, missing-data imputation, and the negative-data transform."""

from __future__ import annotations

import csv
import enum
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, TextIO

import numpy as np
import yaml

log = logging.getLogger(__name__)

MATRICES = ("inputs", "intermediates", "desirable", "undesirable")
ROLE_TO_MATRIX = {
    "input": "inputs",
    "intermediate": "intermediates",
    "desirable": "desirable",
    "undesirable": "undesirable",
}
MISSING_SENTINELS = frozenset({"", "na", "nan"})


class PanelError(ValueError):
    """Base class for panel ingestion and preprocessing errors."""


class MalformedRowError(PanelError):
    pass


class DuplicateNameError(PanelError):
    pass


class SchemaError(PanelError):
    pass


class ImputationError(PanelError):
    pass


class PreprocessError(PanelError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DmuPanel:
    """Named DMUs with four data matrices; ``NaN`` marks a Missing cell.

    Every matrix has one row per DMU. ``columns`` holds the header name of each
    matrix column, in file order.
    """

    names: tuple[str, ...]
    inputs: np.ndarray
    intermediates: np.ndarray
    desirable: np.ndarray
    undesirable: np.ndarray
    columns: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    notes: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        n = len(self.names)
        if n < 1:
            raise PanelError("a panel needs at least one DMU")
        if len(set(self.names)) != n:
            dup = sorted({x for x in self.names if self.names.count(x) > 1})
            raise DuplicateNameError(f"duplicate DMU names: {', '.join(dup)}")
        cols = dict(self.columns)
        for key in MATRICES:
            mat = np.asarray(getattr(self, key), dtype=float)
            if mat.ndim == 1 and mat.size == 0:
                mat = mat.reshape(n, 0)
            if mat.ndim != 2 or mat.shape[0] != n:
                raise PanelError(f"{key} must be an {n}-row matrix, got shape {mat.shape}")
            object.__setattr__(self, key, _frozen(mat))
            names = tuple(cols.get(key, ())) or tuple(f"{key}{i + 1}" for i in range(mat.shape[1]))
            if len(names) != mat.shape[1]:
                raise PanelError(f"{key}: {len(names)} column names for {mat.shape[1]} columns")
            cols[key] = names
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "names", tuple(self.names))
        if self.m < 1:
            raise PanelError("a panel needs at least one input column")
        if self.s1 + self.s2 < 1:
            raise PanelError("a panel needs at least one output column")

    @property
    def n(self) -> int:
        return len(self.names)

    @property
    def m(self) -> int:
        return self.inputs.shape[1]

    @property
    def D(self) -> int:
        return self.intermediates.shape[1]

    @property
    def s1(self) -> int:
        return self.desirable.shape[1]

    @property
    def s2(self) -> int:
        return self.undesirable.shape[1]

    def matrix(self, key: str) -> np.ndarray:
        return getattr(self, key)

    def matrices(self) -> dict[str, np.ndarray]:
        return {key: getattr(self, key) for key in MATRICES}

    def with_matrices(self, notes: Iterable[str] = (), **mats: np.ndarray) -> "DmuPanel":
        return replace(self, **mats, notes=self.notes + tuple(notes))

    def missing_mask(self) -> dict[str, np.ndarray]:
        return {key: np.isnan(mat) for key, mat in self.matrices().items()}

    def is_complete(self) -> bool:
        return not any(mask.any() for mask in self.missing_mask().values())

    def index(self, name: str) -> int:
        return self.names.index(name)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DmuPanel):
            return NotImplemented
        return (
            self.names == other.names
            and dict(self.columns) == dict(other.columns)
            and all(np.array_equal(getattr(self, k), getattr(other, k), equal_nan=True) for k in MATRICES)
        )

    __hash__ = None  # type: ignore[assignment]


# ---------------------------------------------------------------------------
# loading


@dataclass(frozen=True)
class Schema:
    """Column-role map: every data column gets exactly one role."""

    name_column: str
    roles: Mapping[str, str]

    def __post_init__(self) -> None:
        bad = {c: r for c, r in self.roles.items() if r not in ROLE_TO_MATRIX}
        if bad:
            raise SchemaError(f"unknown roles {bad}; expected one of {sorted(ROLE_TO_MATRIX)}")
        if self.name_column in self.roles:
            raise SchemaError(f"name column {self.name_column!r} cannot also carry a data role")


def load_schema(path: str | Path) -> Schema:
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    return schema_from_mapping(raw)


def schema_from_mapping(raw: Mapping) -> Schema:
    try:
        return Schema(str(raw.get("name_column", "dmu")), {str(k): str(v) for k, v in raw["roles"].items()})
    except (KeyError, AttributeError, TypeError) as exc:
        raise SchemaError(f"schema needs a 'roles' mapping: {exc}") from exc


def _parse_cell(text: str, row: int, column: str) -> float:
    token = text.strip()
    if token.lower() in MISSING_SENTINELS:
        return float("nan")
    try:
        return float(token)
    except ValueError:
        raise MalformedRowError(f"row {row}: column {column!r} holds non-numeric value {text!r}") from None


def load_panel(source: TextIO | str, schema: Schema, delimiter: str | None = None) -> DmuPanel:
    """Parse a delimited table (comma by default, tab detected) into a panel.

    ``source`` is an open text stream or the table text itself.
    """
    text = source if isinstance(source, str) else source.read()
    if delimiter is None:
        first = text.split("\n", 1)[0]
        delimiter = "\t" if "\t" in first and "," not in first else ","
    reader = csv.reader(io.StringIO(text), delimiter=delimiter)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise MalformedRowError("empty table") from None
    if len(set(header)) != len(header):
        raise SchemaError("duplicate column headers")

    absent = [c for c in [schema.name_column, *schema.roles] if c not in header]
    if absent:
        raise SchemaError(f"schema references absent column(s): {', '.join(absent)}")
    unassigned = [c for c in header if c != schema.name_column and c not in schema.roles]
    if unassigned:
        raise SchemaError(f"column(s) without a role: {', '.join(unassigned)}")

    names: list[str] = []
    values: list[list[float]] = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec or all(not c.strip() for c in rec):
            continue
        if len(rec) != len(header):
            raise MalformedRowError(f"row {lineno}: expected {len(header)} fields, found {len(rec)}")
        row = dict(zip(header, rec))
        name = row[schema.name_column].strip()
        if name in names:
            raise DuplicateNameError(f"duplicate DMU name {name!r} (rows {names.index(name) + 2} and {lineno})")
        names.append(name)
        values.append([_parse_cell(row[c], lineno, c) for c in header if c in schema.roles])
    if not names:
        raise MalformedRowError("table has a header but no data rows")

    data_cols = [c for c in header if c in schema.roles]
    table = np.array(values, dtype=float).reshape(len(names), len(data_cols))
    mats, cols = {}, {}
    for key in MATRICES:
        picked = [i for i, c in enumerate(data_cols) if ROLE_TO_MATRIX[schema.roles[c]] == key]
        mats[key] = table[:, picked]
        cols[key] = tuple(data_cols[i] for i in picked)
    return DmuPanel(tuple(names), columns=cols, **mats)


def load_panel_file(path: str | Path, schema: Schema, delimiter: str | None = None) -> DmuPanel:
    with open(path, encoding="utf-8", newline="") as fh:
        return load_panel(fh, schema, delimiter)


# ---------------------------------------------------------------------------
# imputation


class Imputer(str, enum.Enum):
    COLUMN_MEAN = "column_mean"
    REGRESSION = "regression"  # OLS on one fully present predictor column


def impute_missing(panel: DmuPanel, strategy: Imputer | str = Imputer.COLUMN_MEAN,
                   predictors: Mapping[str, str] | None = None) -> DmuPanel:
    """Fill Missing cells; present cells are never touched.

    With ``Imputer.REGRESSION`` each incomplete column is regressed on a fully
    present column of the same matrix: ``predictors[column]`` when given,
    otherwise the first such column. A zero-variance predictor falls back to the
    column mean and leaves a note on the returned panel.
    """
    strategy = Imputer(strategy)
    predictors = dict(predictors or {})
    notes: list[str] = []
    out: dict[str, np.ndarray] = {}
    for key, mat in panel.matrices().items():
        filled = mat.copy()
        names = panel.columns[key]
        complete = [j for j in range(mat.shape[1]) if not np.isnan(mat[:, j]).any()]
        for j, col in enumerate(names):
            miss = np.isnan(mat[:, j])
            if not miss.any():
                continue
            present = ~miss
            if present.sum() == 0:
                raise ImputationError(f"column {col!r} is entirely missing")
            if present.sum() < 2:
                raise ImputationError(f"column {col!r} has fewer than two present cells")
            mean = float(mat[present, j].mean())
            if strategy is Imputer.COLUMN_MEAN:
                filled[miss, j] = mean
                continue
            if col in predictors:
                if predictors[col] not in names:
                    raise ImputationError(f"predictor {predictors[col]!r} is not a column of {key}")
                pj = names.index(predictors[col])
                if pj not in complete:
                    raise ImputationError(f"predictor {predictors[col]!r} has missing cells")
            else:
                candidates = [c for c in complete if c != j]
                if not candidates:
                    raise ImputationError(f"no fully present predictor column in {key} for {col!r}")
                pj = candidates[0]
            x = mat[present, pj]
            y = mat[present, j]
            if np.ptp(x) == 0.0:
                note = f"imputation of {col!r}: predictor {names[pj]!r} has zero variance; used column mean"
                log.warning(note)
                notes.append(note)
                filled[miss, j] = mean
                continue
            slope = float(((x - x.mean()) * (y - y.mean())).sum() / ((x - x.mean()) ** 2).sum())
            intercept = float(y.mean() - slope * x.mean())
            filled[miss, j] = intercept + slope * mat[miss, pj]
        out[key] = filled
    return panel.with_matrices(notes=notes, **out)


# ---------------------------------------------------------------------------
# negative data

# Which way each matrix improves: inputs and undesirable outputs go down.
_ORIENTATION = {"inputs": "down", "intermediates": "up", "desirable": "up", "undesirable": "down"}


@dataclass(frozen=True, eq=False)
class IdealPoint:
    """Best observed value per column: minima for inputs, maxima for outputs."""

    values: Mapping[str, np.ndarray]

    def __getitem__(self, key: str) -> np.ndarray:
        return self.values[key]


@dataclass(frozen=True, eq=False)
class RangeDirection:
    """Per-DMU distance to the ideal point, computed on the original data.

    ``values[key][p, c]`` is ``x - min`` for columns that improve downward and
    ``max - y`` for columns that improve upward; never negative.
    """

    values: Mapping[str, np.ndarray]

    def __getitem__(self, key: str) -> np.ndarray:
        return self.values[key]


def ideal_point(panel: DmuPanel) -> IdealPoint:
    vals = {}
    for key, mat in panel.matrices().items():
        if mat.shape[1] == 0:
            vals[key] = np.zeros(0)
        elif _ORIENTATION[key] == "down":
            vals[key] = np.nanmin(mat, axis=0)
        else:
            vals[key] = np.nanmax(mat, axis=0)
    return IdealPoint(vals)


def range_directions(panel: DmuPanel) -> RangeDirection:
    ideal = ideal_point(panel)
    vals = {}
    for key, mat in panel.matrices().items():
        if _ORIENTATION[key] == "down":
            vals[key] = mat - ideal[key]
        else:
            vals[key] = ideal[key] - mat
    return RangeDirection(vals)


def range_directional_transform(panel: DmuPanel, eps_shift: float = 1.0) -> tuple[DmuPanel, RangeDirection]:
    """Shift every column holding a non-positive value so its minimum becomes ``eps_shift``.

    Columns that are already strictly positive are left alone. The returned
    directions are measured on the untransformed values.
    """
    if not eps_shift > 0:
        raise PreprocessError(f"eps_shift must be strictly positive, got {eps_shift}")
    if not panel.is_complete():
        raise PreprocessError("impute missing cells before the range-directional transform")
    directions = range_directions(panel)
    shifted: dict[str, np.ndarray] = {}
    notes: list[str] = []
    for key, mat in panel.matrices().items():
        out = mat.copy()
        for j, col in enumerate(panel.columns[key]):
            column = mat[:, j]
            lo = column.min()
            if lo > 0:
                continue
            if column.max() == lo:
                raise PreprocessError(f"column {col!r} is constant at non-positive value {lo!r}")
            out[:, j] = column - lo + eps_shift
            notes.append(f"column {col!r} shifted by {float(eps_shift - lo)!r} to clear non-positive values")
        shifted[key] = out
    return panel.with_matrices(notes=notes, **shifted), directions


def preprocess(panel: DmuPanel, imputer: Imputer | str = Imputer.COLUMN_MEAN,
               eps_shift: float = 1.0, predictors: Mapping[str, str] | None = None
               ) -> tuple[DmuPanel, RangeDirection]:
    """Impute then shift; the result is complete and strictly positive."""
    filled = impute_missing(panel, imputer, predictors)
    out, directions = range_directional_transform(filled, eps_shift)
    assert_positive(out)
    return out, directions


def assert_positive(panel: DmuPanel) -> None:
    for key, mat in panel.matrices().items():
        if mat.size and not (mat > 0).all():
            bad = np.argwhere(~(mat > 0))[0]
            raise PreprocessError(
                f"{key} cell ({panel.names[bad[0]]}, {panel.columns[key][bad[1]]}) is not strictly positive"
            )
