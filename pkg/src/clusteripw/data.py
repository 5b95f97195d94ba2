"""Cluster-level observed data and a flattened view used by vectorized kernels."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Hashable, Sequence

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True, eq=False)
class ClusterData:
    """Observed data for one cluster.

    Parameters
    ----------
    cluster_id : hashable
        Opaque identifier.
    covariates : array_like, shape (n, p)
        Individual-level baseline covariates, without an intercept column.
    treatment : array_like, shape (n,)
        Binary treatment indicators.
    outcome : array_like, shape (n,)
        Real-valued outcomes.
    """

    cluster_id: Hashable
    covariates: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov.reshape(-1, 1) if cov.size else cov.reshape(0, 0)
        trt = np.asarray(self.treatment)
        out = np.asarray(self.outcome, dtype=float).reshape(-1)
        if trt.ndim != 1:
            trt = trt.reshape(-1)
        n = trt.shape[0]
        if n < 1:
            raise ConfigurationError(f"cluster {self.cluster_id!r} is empty")
        if cov.ndim != 2 or cov.shape[0] != n or out.shape[0] != n:
            raise ConfigurationError(
                f"cluster {self.cluster_id!r}: covariates {cov.shape}, treatment ({n},) "
                f"and outcome {out.shape} disagree"
            )
        if not np.all((trt == 0) | (trt == 1)):
            raise ConfigurationError(f"cluster {self.cluster_id!r}: treatment must be 0/1")
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "treatment", trt.astype(np.int8))
        object.__setattr__(self, "outcome", out)

    @property
    def n(self) -> int:
        return int(self.treatment.shape[0])

    @property
    def n_treated(self) -> int:
        return int(self.treatment.sum())

    @property
    def p(self) -> int:
        return int(self.covariates.shape[1])


@dataclass(frozen=True, eq=False)
class ClusterBatch:
    """Row-stacked individuals of many clusters.

    ``starts`` holds the first row of each cluster so per-cluster sums are
    ``np.add.reduceat(x, starts)``.
    """

    X: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    sizes: np.ndarray
    starts: np.ndarray
    ids: tuple = field(default=())

    @classmethod
    def from_clusters(cls, clusters: Sequence[ClusterData]) -> "ClusterBatch":
        if len(clusters) == 0:
            raise ConfigurationError("no clusters supplied")
        p = clusters[0].p
        if any(c.p != p for c in clusters):
            raise ConfigurationError("clusters have differing covariate counts")
        sizes = np.array([c.n for c in clusters], dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        X = np.concatenate([c.covariates for c in clusters], axis=0)
        A = np.concatenate([c.treatment for c in clusters]).astype(np.int8)
        Y = np.concatenate([c.outcome for c in clusters])
        return cls(X, A, Y, sizes, starts, tuple(c.cluster_id for c in clusters))

    @property
    def M(self) -> int:
        return int(self.sizes.shape[0])

    @property
    def p(self) -> int:
        return int(self.X.shape[1])

    def cluster_sum(self, x: np.ndarray) -> np.ndarray:
        """Sum rows of ``x`` (leading axis = individuals) within clusters."""
        return np.add.reduceat(x, self.starts, axis=0)

    @property
    def n_treated(self) -> np.ndarray:
        return self.cluster_sum(self.A.astype(np.int64))

    def subset(self, idx: Sequence[int]) -> "ClusterBatch":
        idx = np.asarray(idx, dtype=np.int64)
        rows = np.concatenate([np.arange(self.starts[i], self.starts[i] + self.sizes[i]) for i in idx])
        sizes = self.sizes[idx]
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        ids = tuple(self.ids[i] for i in idx) if self.ids else ()
        return ClusterBatch(self.X[rows], self.A[rows], self.Y[rows], sizes, starts, ids)

    def to_clusters(self) -> list[ClusterData]:
        out = []
        for i, (s, n) in enumerate(zip(self.starts, self.sizes)):
            cid: Any = self.ids[i] if self.ids else i
            out.append(ClusterData(cid, self.X[s:s + n], self.A[s:s + n], self.Y[s:s + n]))
        return out


def as_batch(clusters) -> ClusterBatch:
    if isinstance(clusters, ClusterBatch):
        return clusters
    return ClusterBatch.from_clusters(list(clusters))
