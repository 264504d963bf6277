"""CSV readers and writers for cohorts, stratum tables, allocations and metrics.

Floats are written with 17 significant digits so a write/read cycle is
lossless.
"""

from __future__ import annotations

import json

import numpy as np
import pandas as pd

from .allocation import StratumTable
from .errors import ParseError
from .frame import CohortFrame

FLOAT_FORMAT = "%.17g"
DESIGN_COLUMNS = ("stratum", "R", "pi", "weight")


def _read(path):
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError:
        raise
    except (UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc


def _to_float(text):
    try:
        return float(text)
    except ValueError:
        return np.nan


def _numeric(df, column, allow_missing=False):
    raw = df[column].str.strip()
    missing = raw == ""
    # float() parses correctly rounded; pd.to_numeric can be off by one ulp
    values = raw.map(_to_float).where(~missing)
    bad = values.isna() & ~missing
    if bad.any():
        i = int(np.flatnonzero(bad.to_numpy())[0])
        raise ParseError(f"non-numeric value {raw.iloc[i]!r}", row=i + 1, column=column)
    if missing.any() and not allow_missing:
        i = int(np.flatnonzero(missing.to_numpy())[0])
        raise ParseError("missing value", row=i + 1, column=column)
    return values.to_numpy(dtype=float)


def _require(df, columns, path):
    for col in columns:
        if col not in df.columns:
            raise ParseError(f"{path}: missing column {col!r}", column=col)


def read_cohort_csv(path, phase2=("X",), required=()):
    """Read a cohort CSV.

    Columns ``stratum``, ``R``, ``pi`` and ``weight`` are optional design
    columns. Empty cells are allowed only in phase-II columns; when no ``R``
    column is present, a row counts as sampled if all its phase-II values are
    present.

    Parameters
    ----------
    required : sequence of str
        Columns that must be present (e.g. every column a model uses).
    """
    df = _read(path)
    _require(df, required, path)
    phase2 = tuple(c for c in phase2 if c in df.columns)
    data = {}
    for col in df.columns:
        if col in DESIGN_COLUMNS:
            continue
        data[col] = _numeric(df, col, allow_missing=col in phase2)
    data = pd.DataFrame(data)
    if "R" in df.columns:
        R = _numeric(df, "R").astype(bool)
    elif phase2:
        R = data[list(phase2)].notna().all(axis=1).to_numpy()
    else:
        R = np.zeros(len(df), bool)
    for col in phase2:
        miss = np.flatnonzero(R & data[col].isna().to_numpy())
        if len(miss):
            raise ParseError("sampled row has no phase-II value", row=int(miss[0]) + 1, column=col)
    if "stratum" in df.columns:
        stratum = _numeric(df, "stratum")
        if np.any(stratum != np.round(stratum)) or np.any(stratum < 1):
            i = int(np.flatnonzero((stratum != np.round(stratum)) | (stratum < 1))[0])
            raise ParseError("stratum ids must be positive integers", row=i + 1, column="stratum")
        stratum = stratum.astype(np.int64)
    else:
        stratum = np.ones(len(df), dtype=np.int64)
    pi = _numeric(df, "pi") if "pi" in df.columns else None
    weight = _numeric(df, "weight") if "weight" in df.columns else None
    if pi is None and weight is None and R.any():
        # observed rows without design information: treat as a census of the sampled rows
        weight = np.where(R, 1.0, 0.0)
    return CohortFrame(data, stratum, R, pi, weight, phase2=phase2 or ("X",))


def write_cohort_csv(cohort, path):
    """Write a cohort with phase-II values blanked where ``R`` is 0."""
    out = cohort.observed()
    out["stratum"] = cohort.stratum
    out["R"] = cohort.R.astype(int)
    out["pi"] = cohort.pi
    out["weight"] = cohort.weight
    out.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def read_stratum_table_csv(path):
    """Read a StratumTable from columns ``stratum``, ``N`` and ``s``."""
    df = _read(path)
    _require(df, ("stratum", "N", "s"), path)
    ids = _numeric(df, "stratum")
    N = _numeric(df, "N")
    for name, v in (("stratum", ids), ("N", N)):
        bad = np.flatnonzero((v != np.round(v)) | (v < 1))
        if len(bad):
            raise ParseError("expected a positive integer", row=int(bad[0]) + 1, column=name)
    s = _numeric(df, "s")
    bad = np.flatnonzero(s < 0)
    if len(bad):
        raise ParseError("dispersion must be non-negative", row=int(bad[0]) + 1, column="s")
    return StratumTable(ids.astype(np.int64), N.astype(np.int64), s)


def write_stratum_table_csv(table, path):
    pd.DataFrame({"stratum": table.ids, "N": table.N, "s": table.s}).to_csv(
        path, index=False, float_format=FLOAT_FORMAT)


def write_allocation_csv(allocation, path, raw=None):
    df = pd.DataFrame({"stratum": allocation.ids, "N": allocation.N, "n": allocation.n})
    if raw is not None:
        df["neyman"] = raw
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def write_metrics_csv(table, path):
    """Long-format MetricsTable: scenario, design, estimator, coefficient, metric, value."""
    table.to_long().to_csv(path, index=False, float_format=FLOAT_FORMAT)


def write_metadata(path, meta):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True, default=_jsonable)
        f.write("\n")


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"cannot serialise {type(x).__name__}")
