"""Counterfactual treatment policies.

A policy ``alpha`` keeps the fitted covariate slopes and random-intercept SD
and replaces the intercept by ``gamma0`` chosen so that the average
individual treatment probability equals ``alpha``. Counterfactual stratum
probabilities ``omega(s, n, alpha)`` are the policy probabilities that a
size-``n`` cluster has exactly ``s`` treated members, averaged over the
observed clusters of that size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import expit, logsumexp

from .combinatorics import sample_stratum
from .data import ClusterBatch, ClusterData, as_batch
from .errors import ConfigurationError, CoverageError, DomainError, SolverError
from .propensity import PropensityParams, QuadratureRule, _binary, _rule, log_propensity_batch, node_logits

DEFAULT_MAX_EXHAUSTIVE_SIZE = 25


@dataclass(frozen=True)
class PolicySolution:
    alpha: float
    gamma0: float
    solver_residual: float = 0.0


# --------------------------------------------------------------------------
# counterfactual intercept

def cluster_mean_treat_prob(params: PropensityParams, gamma0: float, batch: ClusterBatch,
                            rule: QuadratureRule) -> np.ndarray:
    """``N_i^-1 sum_j int expit(gamma0 + beta1 L_ij + b) dPhi(b; sigma)`` per cluster."""
    Z = node_logits(gamma0, params.beta1, params.sigma, batch.X, rule)
    per_person = expit(Z) @ rule.prob_weights
    return batch.cluster_sum(per_person) / batch.sizes


def marginal_alpha(params: PropensityParams, gamma0: float, clusters,
                   rule: QuadratureRule | None = None) -> float:
    """Average individual treatment probability when the intercept is ``gamma0``."""
    return float(np.mean(cluster_mean_treat_prob(params, gamma0, as_batch(clusters), _rule(rule))))


def solve_gamma0(params: PropensityParams, alpha: float, clusters, rule: QuadratureRule | None = None,
                 tol: float = 1e-10, bracket=(-40.0, 40.0), max_expand: int = 12) -> PolicySolution:
    """Counterfactual intercept giving marginal treatment probability ``alpha``."""
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"policy alpha must lie strictly inside (0, 1), got {alpha}")
    rule = _rule(rule)
    batch = as_batch(clusters)

    def f(g):
        return float(np.mean(cluster_mean_treat_prob(params, g, batch, rule))) - alpha

    lo, hi = bracket
    f_lo, f_hi = f(lo), f(hi)
    width = hi - lo
    for _ in range(max_expand):
        if f_lo < 0 < f_hi:
            break
        # geometric expansion outward from whichever end fails
        if f_lo >= 0:
            lo -= width
            f_lo = f(lo)
        if f_hi <= 0:
            hi += width
            f_hi = f(hi)
        width *= 2.0
    else:
        if not f_lo < 0 < f_hi:
            raise SolverError(f"could not bracket the intercept for alpha={alpha} within [{lo}, {hi}]")

    root = optimize.brentq(f, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200)
    resid = f(root)
    if abs(resid) >= tol:
        raise SolverError(f"intercept residual {resid:.3g} exceeds tolerance {tol:g}")
    return PolicySolution(alpha, float(root), float(resid))


def counterfactual_cluster_propensity(params: PropensityParams, sol: PolicySolution, cluster: ClusterData,
                                      a, rule: QuadratureRule | None = None) -> float:
    """Policy probability of treatment vector ``a`` for one cluster."""
    rule = _rule(rule)
    a = _binary(a, cluster.n)
    batch = ClusterBatch.from_clusters([cluster])
    return float(np.exp(log_propensity_batch(params, batch, rule, A=a, beta0=sol.gamma0)[0]))


def type_b_weights(alpha: float, n: int) -> np.ndarray:
    """Binomial stratum masses ``C(n, s) alpha^s (1 - alpha)^(n - s)``, s = 0..n."""
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    return np.array([math.comb(n, s) * alpha**s * (1.0 - alpha) ** (n - s) for s in range(n + 1)])


# --------------------------------------------------------------------------
# strata

@dataclass(frozen=True, eq=False)
class SizeGroup:
    """Clusters of one size ``n`` with covariates reshaped to (m, n, p)."""

    n: int
    index: np.ndarray
    X: np.ndarray


def size_groups(batch: ClusterBatch) -> dict[int, SizeGroup]:
    groups = {}
    for n in np.unique(batch.sizes):
        idx = np.flatnonzero(batch.sizes == n)
        rows = (batch.starts[idx][:, None] + np.arange(n)[None, :]).reshape(-1)
        groups[int(n)] = SizeGroup(int(n), idx, batch.X[rows].reshape(idx.size, n, batch.p))
    return groups


def observed_strata(batch: ClusterBatch, all_strata: bool = False) -> dict[int, list[int]]:
    """Strata ``s`` to estimate for every observed size ``n``."""
    sizes, treated = batch.sizes, batch.n_treated
    out = {}
    for n in sorted(set(sizes.tolist())):
        if all_strata:
            out[n] = list(range(n + 1))
        else:
            out[n] = sorted(set(treated[sizes == n].tolist()))
    return out


class StratumRegistry:
    """Sampled treatment vectors per stratum ``(n, s)``.

    Built once per ``(k, seed)`` and shared across policies and clusters so
    that point estimates and estimating functions see the same sample.
    """

    def __init__(self, k: int, seed: int):
        if int(k) < 1:
            raise ConfigurationError(f"k must be at least 1, got {k}")
        self.k = int(k)
        self.seed = int(seed)
        self._vectors: dict[tuple[int, int], np.ndarray] = {}

    def vectors(self, n: int, s: int) -> np.ndarray:
        key = (int(n), int(s))
        if key not in self._vectors:
            v = sample_stratum(key[0], key[1], self.k, self.seed)
            v.setflags(write=False)
            self._vectors[key] = v
        return self._vectors[key]

    def upweight(self, n: int, s: int) -> float:
        return math.comb(n, s) / self.vectors(n, s).shape[0]

    def as_dict(self) -> dict[tuple[int, int], np.ndarray]:
        return dict(self._vectors)


def _poisson_binomial(P: np.ndarray) -> np.ndarray:
    """Distribution of the number of successes, P shape (..., n) -> (..., n + 1)."""
    n = P.shape[-1]
    dist = np.zeros(P.shape[:-1] + (n + 1,))
    dist[..., 0] = 1.0
    for j in range(n):
        p = P[..., j:j + 1]
        shifted = dist[..., :-1] * p
        dist *= 1.0 - p
        dist[..., 1:] += shifted
    return dist


def stratum_sums(params: PropensityParams, gamma0: float, group: SizeGroup, strata, rule: QuadratureRule,
                 registry: StratumRegistry | None = None) -> np.ndarray:
    """Per-cluster policy probability of landing in each stratum, shape (m, len(strata)).

    Exhaustive mode (``registry is None``) sums over all of ``A(n, s)`` exactly
    by convolving the individual Bernoulli probabilities at each quadrature
    node. Sub-sampled mode sums over the registered vectors only and
    up-weights by ``C(n, s) / k_sn``.
    """
    strata = list(strata)
    b = rule.abscissae(params.sigma)
    eta = gamma0 + group.X @ params.beta1                       # (m, n)
    Z = eta[:, :, None] + b[None, None, :]                      # (m, n, Q)
    if registry is None:
        P = np.moveaxis(expit(Z), 1, 2)                         # (m, Q, n)
        dist = _poisson_binomial(P)                             # (m, Q, n+1)
        full = np.einsum("mqs,q->ms", dist, rule.prob_weights)
        return full[:, strata]
    base = -np.logaddexp(0.0, Z).sum(axis=1)                    # sum_j log(1 - p_j), (m, Q)
    out = np.empty((group.index.size, len(strata)))
    for col, s in enumerate(strata):
        V = registry.vectors(group.n, s).astype(float)          # (k, n)
        logp = np.einsum("kn,mnq->kmq", V, Z) + base[None] + rule.log_weights[None, None, :]
        probs = np.exp(logsumexp(logp, axis=2))                 # (k, m)
        out[:, col] = registry.upweight(group.n, s) * probs.sum(axis=0)
    return out


@dataclass(eq=False)
class CounterfactualWeights:
    """Estimated ``omega(s, n, alpha)``; entries not estimated are NaN."""

    alpha: float
    gamma0: float
    per_size: dict[int, np.ndarray]
    k: int | None = None
    seed: int | None = None
    sampled_strata: dict = field(default_factory=dict)
    cluster_counts: dict[int, int] = field(default_factory=dict)

    def omega(self, s: int, n: int) -> float:
        vec = self.per_size.get(int(n))
        if vec is None or not 0 <= s <= n or not np.isfinite(vec[s]):
            raise CoverageError(
                f"omega(s={s}, n={n}) was not estimated for alpha={self.alpha}; "
                "increase k or estimate all strata"
            )
        return float(vec[s])

    def vector_weight(self, s: int, n: int) -> float:
        """Policy probability of one particular vector with ``s`` ones."""
        return self.omega(s, n) / math.comb(n, s)


def _estimate_omega(params, sol, clusters, rule, registry, all_strata, max_size):
    rule = _rule(rule)
    batch = as_batch(clusters)
    strata = observed_strata(batch, all_strata)
    if registry is None and max_size is not None:
        too_big = [n for n in strata if n > max_size]
        if too_big:
            raise ConfigurationError(
                f"cluster sizes {too_big} exceed the exhaustive-enumeration cap ({max_size}); "
                "use estimate_omega_subsampled"
            )
    per_size, counts = {}, {}
    for n, group in size_groups(batch).items():
        sums = stratum_sums(params, sol.gamma0, group, strata[n], rule, registry)
        vec = np.full(n + 1, np.nan)
        vec[strata[n]] = sums.mean(axis=0)
        per_size[n] = vec
        counts[n] = int(group.index.size)
    return per_size, counts


def estimate_omega_exhaustive(params: PropensityParams, sol: PolicySolution, clusters,
                              rule: QuadratureRule | None = None, all_strata: bool = False,
                              max_size: int | None = DEFAULT_MAX_EXHAUSTIVE_SIZE) -> CounterfactualWeights:
    """``omega_hat(s, n, alpha)`` summing over every vector of each stratum."""
    per_size, counts = _estimate_omega(params, sol, clusters, rule, None, all_strata, max_size)
    return CounterfactualWeights(sol.alpha, sol.gamma0, per_size, cluster_counts=counts)


def estimate_omega_subsampled(params: PropensityParams, sol: PolicySolution, clusters,
                              rule: QuadratureRule | None = None, k: int = 1, seed: int = 0,
                              all_strata: bool = False,
                              registry: StratumRegistry | None = None) -> CounterfactualWeights:
    """``omega_hat(s, n, alpha, k)`` from ``min(k, C(n, s))`` sampled vectors per stratum."""
    registry = StratumRegistry(k, seed) if registry is None else registry
    per_size, counts = _estimate_omega(params, sol, clusters, rule, registry, all_strata, None)
    sampled = {key: v for key, v in registry.as_dict().items() if key[0] in per_size}
    return CounterfactualWeights(sol.alpha, sol.gamma0, per_size, registry.k, registry.seed, sampled, counts)
