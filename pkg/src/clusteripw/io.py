"""CSV ingestion of long-format cluster data and versioned JSON sidecars."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .data import ClusterData
from .errors import SchemaError

SCHEMA_VERSION = 1


def read_clusters_csv(path, id_col: str = "cluster_id", treatment_col: str = "treatment",
                      outcome_col: str = "outcome", covariates: Sequence[str] | None = None):
    """Read one row per individual into clusters.

    Parameters
    ----------
    covariates : sequence of str, optional
        Covariate columns; default is every column other than the id,
        treatment and outcome columns, in file order.

    Returns
    -------
    clusters : list of ClusterData
        In order of first appearance of each id.
    covariates : list of str
    """
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype={id_col: str}, skipinitialspace=True)
    except pd.errors.ParserError as err:
        raise SchemaError(f"{path}: malformed CSV ({err})") from None
    except pd.errors.EmptyDataError:
        raise SchemaError(f"{path}: file is empty") from None

    required = [id_col, treatment_col, outcome_col]
    if covariates is None:
        covariates = [c for c in df.columns if c not in required]
    missing = [c for c in required + list(covariates) if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {missing}; found {list(df.columns)}")
    if not covariates:
        raise SchemaError(f"{path}: no covariate columns")
    if df.empty:
        raise SchemaError(f"{path}: no data rows")

    # header is line 1, so data row i sits on line i + 2
    if df[id_col].isna().any():
        line = int(np.flatnonzero(df[id_col].isna())[0]) + 2
        raise SchemaError(f"{path}, line {line}: empty {id_col}")
    numeric = {}
    for col in [treatment_col, outcome_col, *covariates]:
        vals = pd.to_numeric(df[col], errors="coerce")
        bad = vals.isna() | ~np.isfinite(vals.to_numpy(dtype=float, na_value=np.nan))
        if bad.any():
            line = int(np.flatnonzero(bad.to_numpy())[0]) + 2
            raise SchemaError(f"{path}, line {line}: column {col!r} has non-numeric or missing value "
                              f"{df[col].iloc[line - 2]!r}")
        numeric[col] = vals.to_numpy(dtype=float)
    trt = numeric[treatment_col]
    bad = (trt != 0) & (trt != 1)
    if bad.any():
        line = int(np.flatnonzero(bad)[0]) + 2
        raise SchemaError(f"{path}, line {line}: treatment must be 0 or 1, got {trt[line - 2]!r}")

    X = np.column_stack([numeric[c] for c in covariates])
    codes, uniques = pd.factorize(df[id_col], sort=False)
    order = np.argsort(codes, kind="stable")
    bounds = np.searchsorted(codes[order], np.arange(len(uniques) + 1))
    clusters = []
    for j, cid in enumerate(uniques):
        rows = order[bounds[j]:bounds[j + 1]]
        clusters.append(ClusterData(cid, X[rows], trt[rows].astype(np.int8), numeric[outcome_col][rows]))
    return clusters, list(covariates)


def clusters_to_frame(clusters, covariates: Sequence[str] | None = None) -> pd.DataFrame:
    p = clusters[0].p
    covariates = list(covariates) if covariates is not None else [f"x{j + 1}" for j in range(p)]
    frames = []
    for c in clusters:
        d = pd.DataFrame(c.covariates, columns=covariates)
        d.insert(0, "cluster_id", c.cluster_id)
        d.insert(1, "treatment", c.treatment.astype(int))
        d.insert(2, "outcome", c.outcome)
        frames.append(d)
    return pd.concat(frames, ignore_index=True)


def write_clusters_csv(clusters, path, covariates: Sequence[str] | None = None) -> None:
    clusters_to_frame(clusters, covariates).to_csv(path, index=False)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def write_json(path, payload: dict) -> None:
    """Write ``payload`` with a ``schema_version`` field; byte-stable for equal input."""
    body = {"schema_version": SCHEMA_VERSION, **payload}
    Path(path).write_text(json.dumps(_clean(body), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path) -> dict:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"{path}: unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    return data
