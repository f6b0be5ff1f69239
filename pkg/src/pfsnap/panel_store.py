"""Loading, validating and transforming the individual-by-wave panel.

All transformations return new objects; nothing is modified in place.
Rows are kept sorted by ``(individual_id, wave_year)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import DuplicateKeyError, SchemaError

KEY = ("individual_id", "wave_year")

DOMAINS = ("binary", "nonneg", "positive", "unit", "real", "integer", "posint", "categorical")


@dataclass(frozen=True)
class ColumnSchema:
    """Maps one semantic role onto a CSV column."""

    role: str
    column: str
    required: bool = True
    domain: str = "real"

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r} for role {self.role!r}")


def _c(role, domain, required=True):
    return ColumnSchema(role, role, required, domain)


DEFAULT_SCHEMA: tuple[ColumnSchema, ...] = (
    _c("individual_id", "integer"),
    _c("wave_year", "integer"),
    _c("state_id", "categorical"),
    _c("food_exp_pc", "nonneg"),
    _c("income_pc", "nonneg"),
    _c("snap", "binary"),
    _c("weight", "nonneg"),
    _c("rp_female", "binary"),
    _c("rp_age", "real"),
    _c("rp_age_sq", "real", required=False),
    _c("rp_white", "binary"),
    _c("rp_married", "binary"),
    _c("rp_employed", "binary"),
    _c("rp_disabled", "binary"),
    _c("rp_college", "binary"),
    _c("hh_size", "posint"),
    _c("pct_children", "unit"),
    _c("tfp_cost", "positive"),
    _c("coli", "positive"),
    _c("unemployment_rate", "real", required=False),
    _c("income_to_fpl_ratio", "nonneg", required=False),
    _c("low_income_flag", "binary", required=False),
)


def schema_from_mapping(mapping: Mapping[str, str], base: Sequence[ColumnSchema] = DEFAULT_SCHEMA):
    """Override the CSV column names of ``base`` with ``role -> column`` pairs.

    Roles that are not in ``base`` are added as optional real-valued columns.
    """
    by_role = {s.role: s for s in base}
    for role, column in mapping.items():
        if role in by_role:
            by_role[role] = replace(by_role[role], column=column)
        else:
            by_role[role] = ColumnSchema(role, column, required=False, domain="real")
    columns = [s.column for s in by_role.values()]
    dupes = sorted({c for c in columns if columns.count(c) > 1})
    if dupes:
        raise SchemaError(f"columns mapped to more than one role: {dupes}")
    return tuple(by_role.values())


@dataclass
class PanelDataset:
    """Individual-by-wave observation table.

    ``data`` uses role names as column names. ``violations`` lists domain
    problems found at load time as ``(line, role, value)`` with ``line`` the
    1-based line number of the source CSV (header is line 1).
    """

    data: pd.DataFrame
    violations: list = field(default_factory=list)
    schema: tuple = DEFAULT_SCHEMA

    def __len__(self):
        return len(self.data)

    def with_data(self, data):
        return PanelDataset(data, list(self.violations), self.schema)


def as_frame(panel) -> pd.DataFrame:
    if isinstance(panel, PanelDataset):
        return panel.data
    if isinstance(panel, pd.DataFrame):
        return panel
    raise TypeError(f"expected PanelDataset or DataFrame, got {type(panel).__name__}")


def _like(panel, frame):
    if isinstance(panel, PanelDataset):
        return panel.with_data(frame)
    return frame


def _domain_mask(values: pd.Series, domain: str) -> np.ndarray:
    """True where a non-missing value violates ``domain``."""
    v = values.to_numpy(dtype=float)
    ok = np.isnan(v)
    if domain == "binary":
        ok |= (v == 0) | (v == 1)
    elif domain == "nonneg":
        ok |= v >= 0
    elif domain == "positive":
        ok |= v > 0
    elif domain == "unit":
        ok |= (v >= 0) & (v <= 1)
    elif domain == "integer":
        ok |= v == np.round(v)
    elif domain == "posint":
        ok |= (v == np.round(v)) & (v > 0)
    else:
        ok |= np.isfinite(v)
    return ~ok


def load_panel(path, schema: Sequence[ColumnSchema] = DEFAULT_SCHEMA) -> PanelDataset:
    """Read a panel CSV and validate it against ``schema``.

    Missing required columns, duplicate keys and non-numeric entries in
    numeric columns raise. Domain violations (e.g. a negative expenditure)
    are collected in ``PanelDataset.violations`` instead.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    if raw.columns.empty:
        raise SchemaError(f"{path}: no header row")

    by_role = {s.role: s for s in schema}
    missing = [s.column for s in schema if s.required and s.column not in raw.columns]
    if "low_income_flag" in by_role and "income_to_fpl_ratio" in by_role:
        flag_col = by_role["low_income_flag"].column
        ratio_col = by_role["income_to_fpl_ratio"].column
        if flag_col not in raw.columns and ratio_col not in raw.columns:
            missing.append(f"{flag_col} (or {ratio_col})")
    if missing:
        raise SchemaError(f"missing required column(s): {', '.join(missing)}")

    out = {}
    mapped = set()
    for s in schema:
        if s.column not in raw.columns:
            continue
        mapped.add(s.column)
        col = raw[s.column].str.strip()
        if s.domain == "categorical":
            out[s.role] = col.where(col != "", None)
            continue
        num = pd.to_numeric(col.where(col != "", None), errors="coerce")
        bad = num.isna() & (col != "")
        if bad.any():
            i = int(np.flatnonzero(bad.to_numpy())[0])
            raise SchemaError(
                f"non-numeric value {col.iloc[i]!r} in column {s.column!r} at line {i + 2}"
            )
        out[s.role] = num.astype(float)
    for c in raw.columns:
        if c not in mapped:
            extra = raw[c].str.strip()
            num = pd.to_numeric(extra.where(extra != "", None), errors="coerce")
            out[c] = num if not (num.isna() & (extra != "")).any() else extra
    frame = pd.DataFrame(out)

    for k in KEY:
        if frame[k].isna().any():
            i = int(np.flatnonzero(frame[k].isna().to_numpy())[0])
            raise SchemaError(f"missing key value in {by_role[k].column!r} at line {i + 2}")
        frame[k] = frame[k].astype(np.int64)

    dup = frame.duplicated(list(KEY), keep=False)
    if dup.any():
        lines = (np.flatnonzero(dup.to_numpy()) + 2).tolist()
        first = frame.loc[dup, list(KEY)].iloc[0]
        same = frame.index[(frame[KEY[0]] == first[KEY[0]]) & (frame[KEY[1]] == first[KEY[1]])]
        raise DuplicateKeyError(
            f"duplicate key ({first[KEY[0]]}, {first[KEY[1]]}) at lines "
            f"{', '.join(str(i + 2) for i in same)}"
            + (f"; {len(lines)} duplicated rows in total" if len(lines) > len(same) else "")
        )

    violations = []
    for s in schema:
        if s.role not in frame or s.domain == "categorical":
            continue
        mask = _domain_mask(frame[s.role], s.domain)
        for i in np.flatnonzero(mask):
            violations.append((int(i) + 2, s.role, float(frame[s.role].iloc[i])))

    if "rp_age_sq" not in frame and "rp_age" in frame:
        frame["rp_age_sq"] = frame["rp_age"] ** 2
    if "income_to_fpl_ratio" in frame:
        below = (frame["income_to_fpl_ratio"] < 1.3).astype(float)
        frame["low_income_flag"] = below.groupby(frame["individual_id"]).transform("max")
    elif "low_income_flag" in frame:
        spread = frame.groupby("individual_id")["low_income_flag"].transform(lambda s: s.nunique())
        for i in np.flatnonzero(spread.to_numpy() > 1):
            violations.append((int(i) + 2, "low_income_flag", float(frame["low_income_flag"].iloc[i])))

    frame = frame.sort_values(list(KEY), kind="mergesort").reset_index(drop=True)
    violations.sort()
    return PanelDataset(frame, violations, tuple(schema))


def weighted_quantile(values, q, weights=None) -> float:
    """Left-continuous weighted quantile ``inf{x : F(x) >= q}``.

    ``F`` is the weighted empirical CDF. Zero-weight points never define the
    quantile.
    """
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise ValueError("empty input")
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != x.shape:
        raise ValueError("values and weights differ in length")
    if np.any(w < 0):
        raise ValueError("negative weight")
    keep = w > 0
    x, w = x[keep], w[keep]
    if x.size == 0:
        raise ValueError("zero total weight")
    order = np.argsort(x, kind="mergesort")
    x, w = x[order], w[order]
    cw = np.cumsum(w)
    total = cw[-1]
    # relative slack absorbs rounding in the cumulative sum
    i = int(np.searchsorted(cw, q * total - 1e-12 * total, side="left"))
    return float(x[min(i, x.size - 1)])


def winsorize_top(values, fraction: float, weights=None) -> np.ndarray:
    """Cap values above the ``1 - fraction`` weighted quantile at that quantile.

    Ties at the quantile are left alone, so the operation is idempotent.
    """
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise ValueError("empty input")
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    finite = ~np.isnan(x)
    w = None if weights is None else np.asarray(weights, dtype=float)[finite]
    cap = weighted_quantile(x[finite], 1.0 - fraction, w)
    out = x.copy()
    out[finite & (x > cap)] = cap
    return out


def deflate(nominal, cpi_t, cpi_base):
    """Express ``nominal`` in base-period money: ``nominal * cpi_base / cpi_t``."""
    cpi_t = np.asarray(cpi_t, dtype=float)
    cpi_base = np.asarray(cpi_base, dtype=float)
    if np.any(cpi_t <= 0) or np.any(cpi_base <= 0):
        raise ValueError("CPI values must be positive")
    out = np.asarray(nominal, dtype=float) * cpi_base / cpi_t
    return float(out) if out.ndim == 0 else out


def lag_join(panel, column: str, lag_years: int, *, individual="individual_id", wave="wave_year"):
    """Attach ``column`` observed ``lag_years`` calendar years earlier.

    Adds ``{column}_lag{lag_years}`` (NaN where the earlier wave is absent)
    and a boolean ``{column}_lag{lag_years}_missing``. Row count and order are
    unchanged.
    """
    df = as_frame(panel)
    if column not in df:
        raise KeyError(f"unknown column {column!r}")
    if lag_years <= 0:
        raise ValueError("lag_years must be positive")
    name = f"{column}_lag{lag_years}"
    src = df[[individual, wave, column]].rename(columns={column: name})
    src = src.assign(**{wave: src[wave] + lag_years})
    out = df.drop(columns=[name, f"{name}_missing"], errors="ignore")
    out = out.merge(src, on=[individual, wave], how="left", validate="one_to_one")
    out.index = df.index
    out[f"{name}_missing"] = out[name].isna()
    return _like(panel, out)


def weighted_summary(panel, columns: Iterable[str], weight: str | None = "weight") -> pd.DataFrame:
    """N, weighted mean and weighted standard deviation per column.

    The standard deviation uses the population convention
    ``sqrt(sum w (x - m)^2 / sum w)``; a single row gives 0. Missing values
    are dropped column by column. ``weight=None`` gives unweighted moments.
    """
    df = as_frame(panel)
    rows = []
    for c in columns:
        x = df[c].to_numpy(dtype=float)
        w = np.ones_like(x) if weight is None else df[weight].to_numpy(dtype=float)
        keep = ~(np.isnan(x) | np.isnan(w))
        x, w = x[keep], w[keep]
        total = w.sum()
        if total <= 0:
            raise ValueError(f"zero total weight for column {c!r}")
        mean = float(np.dot(w, x) / total)
        sd = float(np.sqrt(np.dot(w, (x - mean) ** 2) / total))
        rows.append({"variable": c, "n": int(x.size), "mean": mean, "sd": sd})
    return pd.DataFrame(rows, columns=["variable", "n", "mean", "sd"])
