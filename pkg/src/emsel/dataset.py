"""Loading, validation, centering, and design expansion of observational data."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ValidationError

MAX_DESIGN_COLUMNS = 100_000


@dataclass(frozen=True)
class Dataset:
    """Raw observations: covariates x (n x p), treatment t, outcome y."""

    x: np.ndarray
    t: np.ndarray
    y: np.ndarray
    covariate_names: list[str]

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        t = np.asarray(self.t, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        if x.ndim != 2:
            raise ValidationError("covariate matrix must be 2-dimensional")
        n, p = x.shape
        if n < 2 or p < 1:
            raise ValidationError(f"need n >= 2 and p >= 1, got n={n}, p={p}")
        if t.shape != (n,) or y.shape != (n,):
            raise ValidationError("treatment/outcome length must match covariate rows")
        if not (np.isfinite(x).all() and np.isfinite(t).all() and np.isfinite(y).all()):
            raise ValidationError("non-finite entries in data")
        names = list(self.covariate_names)
        if len(names) != p:
            raise ValidationError(f"expected {p} covariate names, got {len(names)}")
        if len(set(names)) != p:
            raise ValidationError("covariate names must be unique")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class DesignSpec:
    """Which covariate columns act as potential effect modifiers.

    ``effect_modifier_columns`` holds 0-based column indices into ``Dataset.x``.
    """

    effect_modifier_columns: tuple[int, ...]
    include_interactions: bool = False

    def __post_init__(self):
        cols = tuple(int(c) for c in self.effect_modifier_columns)
        if len(cols) == 0:
            raise ValidationError("effect_modifier_columns must be non-empty")
        if len(set(cols)) != len(cols):
            raise ValidationError("effect_modifier_columns must be unique")
        if min(cols) < 0:
            raise ValidationError("effect_modifier_columns must be non-negative")
        object.__setattr__(self, "effect_modifier_columns", cols)

    def validate_against(self, d: Dataset) -> None:
        if max(self.effect_modifier_columns) >= d.p:
            raise ValidationError("effect modifier column index out of range")

    @classmethod
    def all_columns(cls, d: Dataset, include_interactions: bool = False) -> "DesignSpec":
        return cls(tuple(range(d.p)), include_interactions)


@dataclass(frozen=True)
class ColumnSchema:
    """Column-role map for CSV ingestion."""

    outcome: str
    treatment: str
    covariates: tuple[str, ...] | None = None  # None: all remaining columns


_MISSING_TOKENS = {"", "NA", "NaN", "nan", "N/A", "na", "."}


def load_csv(path, schema: ColumnSchema) -> tuple[Dataset, int]:
    """Load a CSV file into a Dataset.

    Rows with a missing cell in any used column are dropped and counted.
    Categorical covariate columns (non-numeric) are expanded into k-1
    indicator columns named "col (level)", with the first sorted level as
    the reference; the indicators are appended after the numeric covariates.

    Returns (dataset, number_of_dropped_rows).
    """
    try:
        df = pd.read_csv(path, skipinitialspace=True, na_values=list(_MISSING_TOKENS),
                         keep_default_na=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ValidationError(f"malformed CSV {path}: {e}") from e

    for col in (schema.outcome, schema.treatment):
        if col not in df.columns:
            raise ValidationError(f"column {col!r} not found in {path}")
    if schema.covariates is None:
        covariates = [c for c in df.columns if c not in (schema.outcome, schema.treatment)]
    else:
        covariates = list(schema.covariates)
        for c in covariates:
            if c not in df.columns:
                raise ValidationError(f"covariate column {c!r} not found in {path}")
    if not covariates:
        raise ValidationError("schema must name at least one covariate column")

    used = [schema.outcome, schema.treatment] + covariates
    sub = df[used]
    keep = ~sub.isna().any(axis=1)
    n_dropped = int((~keep).sum())
    sub = sub.loc[keep]
    if len(sub) == 0:
        raise ValidationError("zero usable rows after dropping missing values")

    def numeric_or_none(s: pd.Series):
        try:
            return pd.to_numeric(s)
        except (ValueError, TypeError):
            return None

    for col in (schema.outcome, schema.treatment):
        if numeric_or_none(sub[col]) is None:
            raise ValidationError(f"non-numeric values in column {col!r}")

    numeric_cols: list[tuple[str, np.ndarray]] = []
    indicator_cols: list[tuple[str, np.ndarray]] = []
    for c in covariates:
        vals = numeric_or_none(sub[c])
        if vals is not None:
            numeric_cols.append((c, vals.to_numpy(dtype=float)))
            continue
        levels = sorted(sub[c].astype(str).unique())
        for level in levels[1:]:  # first sorted level is the reference
            ind = (sub[c].astype(str) == level).to_numpy(dtype=float)
            indicator_cols.append((f"{c} ({level})", ind))

    columns = numeric_cols + indicator_cols
    names = [name for name, _ in columns]
    x = np.column_stack([v for _, v in columns])
    y = pd.to_numeric(sub[schema.outcome]).to_numpy(dtype=float)
    t = pd.to_numeric(sub[schema.treatment]).to_numpy(dtype=float)
    return Dataset(x=x, t=t, y=y, covariate_names=names), n_dropped


def center_columns(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Center each column of m; returns (centered matrix, column means)."""
    m = np.asarray(m, dtype=float)
    if m.ndim == 1:
        m = m[:, None]
    if m.shape[0] < 1:
        raise ValidationError("cannot center an empty matrix")
    means = m.mean(axis=0)
    return m - means, means


def expand_interactions(d: Dataset, spec: DesignSpec) -> Dataset:
    """Append first-order pairwise products of the covariate columns.

    Output has p + p(p-1)/2 covariates; interaction names are "a×b" and the
    original columns precede all products.
    """
    if not spec.include_interactions:
        raise ValidationError("expand_interactions called with include_interactions=False")
    spec.validate_against(d)
    p = d.p
    total = p + p * (p - 1) // 2
    if total > MAX_DESIGN_COLUMNS:
        raise ValidationError(f"interacted design would have {total} columns (limit {MAX_DESIGN_COLUMNS})")
    if p == 1:
        return d
    prods = []
    names = list(d.covariate_names)
    for i, j in itertools.combinations(range(p), 2):
        prods.append(d.x[:, i] * d.x[:, j])
        names.append(f"{d.covariate_names[i]}×{d.covariate_names[j]}")
    x = np.column_stack([d.x] + [np.column_stack(prods)])
    return Dataset(x=x, t=d.t, y=d.y, covariate_names=names)
