"""Simulation study: data-generating process, empirical truth, replication harness.

Each cluster draws a size, individual covariates ``L1 ~ N(40, 5)`` and
``L2 ~ N(L*, 0.2)`` around a cluster-level ``L* ~ N(6, 1)``, a random
intercept ``b ~ N(0, sigma)``, treatments from the logistic random-intercept
model, and Bernoulli outcomes whose mean depends on own treatment and the
treated fraction of the other cluster members.

Random streams come from Philox generators keyed by ``(seed, replicate,
purpose)`` so every draw is reproducible and independent of execution order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.special import expit, logit

from .data import ClusterBatch, ClusterData
from .errors import ConfigurationError, DomainError
from .estimands import EstimandSpec
from .policy import SizeGroup, solve_gamma0, stratum_sums, type_b_weights
from .propensity import PropensityParams, QuadratureRule, gauss_hermite

logger = logging.getLogger(__name__)

# stream ids for SeedSequence spawn keys
_SIZES, _COVARIATES, _INTERCEPTS, _TREATMENT, _OUTCOME = range(5)
_TRUTH_GAMMA, _TRUTH_OMEGA, _TRUTH_OUTCOME, _TRUTH_QUAD = range(10, 14)


@dataclass(frozen=True)
class DgpConfig:
    """Data-generating process settings.

    ``normal_scale`` says how the second argument of each Normal is read:
    ``"sd"`` (default) or ``"variance"``.

    The default outcome intercept is -0.1, the value under which the
    reference truth values (for example mu(0.4) = 0.662) are recovered.
    An intercept of +0.1 shifts every mean up by about 0.04 and leaves the
    contrasts within 0.001 of their default values.
    """

    M: int = 125
    sizes: tuple = (8, 22, 40)
    size_probs: tuple = (0.4, 0.35, 0.25)
    l1_mean: float = 40.0
    l1_scale: float = 5.0
    lstar_mean: float = 6.0
    lstar_scale: float = 1.0
    l2_scale: float = 0.2
    beta0: float = 0.75
    beta1: tuple = (-0.015, -0.025)
    sigma: float = 0.75
    outcome_intercept: float = -0.1
    outcome_l1: float = -0.05
    outcome_l2: float = 0.5
    outcome_treat: float = -0.5
    outcome_spill: float = 0.2
    outcome_interact: float = -0.25
    normal_scale: str = "sd"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(n) for n in self.sizes))
        object.__setattr__(self, "size_probs", tuple(float(p) for p in self.size_probs))
        object.__setattr__(self, "beta1", tuple(float(b) for b in self.beta1))
        if len(self.sizes) != len(self.size_probs) or not self.sizes:
            raise ConfigurationError("sizes and size_probs must have equal nonzero length")
        if min(self.sizes) < 1:
            raise ConfigurationError("cluster sizes must be positive")
        if abs(sum(self.size_probs) - 1.0) > 1e-9 or min(self.size_probs) < 0:
            raise ConfigurationError("size probabilities must be nonnegative and sum to 1")
        if min(self.l1_scale, self.lstar_scale, self.l2_scale, self.sigma) < 0:
            raise ConfigurationError("scale parameters must be nonnegative")
        if self.normal_scale not in ("sd", "variance"):
            raise ConfigurationError("normal_scale must be 'sd' or 'variance'")
        if len(self.beta1) != 2:
            raise ConfigurationError("the design has exactly two covariates")

    def sd(self, scale: float) -> float:
        return scale if self.normal_scale == "sd" else math.sqrt(scale)

    @property
    def true_params(self) -> PropensityParams:
        return PropensityParams(self.beta0, np.array(self.beta1), self.sd(self.sigma))

    def with_(self, **kw) -> "DgpConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sizes"], d["size_probs"], d["beta1"] = list(self.sizes), list(self.size_probs), list(self.beta1)
        return d


def fast_config(**kw) -> DgpConfig:
    """Small-cluster variant (sizes 4, 8, 12) used for quick replication runs."""
    return DgpConfig(sizes=(4, 8, 12), **kw)


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=tuple(key))))


def draw_sizes(cfg: DgpConfig, rng: np.random.Generator, m: int) -> np.ndarray:
    idx = rng.choice(len(cfg.sizes), size=m, p=np.asarray(cfg.size_probs))
    return np.asarray(cfg.sizes, dtype=np.int64)[idx]


def draw_covariates(cfg: DgpConfig, rng: np.random.Generator, sizes: np.ndarray):
    """Stacked ``(L1, L2)`` for clusters of the given sizes, each of length ``sum(sizes)``."""
    m, total = sizes.shape[0], int(sizes.sum())
    lstar = rng.normal(cfg.lstar_mean, cfg.sd(cfg.lstar_scale), size=m)
    l1 = rng.normal(cfg.l1_mean, cfg.sd(cfg.l1_scale), size=total)
    l2 = rng.normal(np.repeat(lstar, sizes), cfg.sd(cfg.l2_scale))
    return l1, l2


def treatment_logit(cfg: DgpConfig, l1, l2, intercept: float):
    return intercept + cfg.beta1[0] * l1 + cfg.beta1[1] * l2


def outcome_prob(cfg: DgpConfig, l1, l2, a, g):
    """Outcome mean given own treatment ``a`` and treated fraction ``g`` of the others."""
    return expit(cfg.outcome_intercept + cfg.outcome_l1 * l1 + cfg.outcome_l2 * l2
                 + cfg.outcome_treat * a + cfg.outcome_spill * g + cfg.outcome_interact * a * g)


def others_treated_fraction(a_sum, a, n):
    # a singleton cluster has no others; its spillover term is zero
    n = np.asarray(n, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        g = (a_sum - a) / (n - 1.0)
    return np.where(n > 1, g, 0.0)


def generate_dataset(cfg: DgpConfig, replicate: int = 0) -> list[ClusterData]:
    """Simulate ``cfg.M`` clusters (sizes, covariates, intercepts, treatments, outcomes)."""
    key = (int(replicate),)
    sizes = draw_sizes(cfg, stream(cfg.seed, *key, _SIZES), cfg.M)
    l1, l2 = draw_covariates(cfg, stream(cfg.seed, *key, _COVARIATES), sizes)
    b = stream(cfg.seed, *key, _INTERCEPTS).normal(0.0, cfg.sd(cfg.sigma), size=cfg.M)
    n_rep = np.repeat(sizes, sizes)
    p_treat = expit(treatment_logit(cfg, l1, l2, cfg.beta0) + np.repeat(b, sizes))
    a = (stream(cfg.seed, *key, _TREATMENT).random(l1.shape[0]) < p_treat).astype(np.int8)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    a_sum = np.repeat(np.add.reduceat(a.astype(np.int64), starts), sizes)
    g = others_treated_fraction(a_sum, a, n_rep)
    y = (stream(cfg.seed, *key, _OUTCOME).random(l1.shape[0]) < outcome_prob(cfg, l1, l2, a, g)).astype(float)
    X = np.column_stack([l1, l2])
    batch = ClusterBatch(X, a, y, sizes, starts.astype(np.int64), tuple(range(cfg.M)))
    return batch.to_clusters()


# --------------------------------------------------------------------------
# empirical truth by simulation

def _chunks(total: int, chunk: int):
    done = 0
    while done < total:
        step = min(chunk, total - done)
        yield step
        done += step


def truth_gamma0(cfg: DgpConfig, alpha: float, m1: int = 10**6, grid_step: float = 0.005,
                 grid=(-10.0, 10.0), seed: int | None = None) -> float:
    """Grid search for the policy intercept on ``m1`` simulated clusters.

    For every grid value the policy treatments are simulated and the treated
    fraction recorded; the intercept is the midpoint of the grid values whose
    fractions fall closest below and above ``alpha``. All grid values share
    one set of uniforms, which makes the fraction monotone in the intercept and
    lets every grid point be read off a single sorted array.
    """
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    seed = cfg.seed if seed is None else seed
    rng = stream(seed, _TRUTH_GAMMA)
    sizes = draw_sizes(cfg, rng, m1)
    l1, l2 = draw_covariates(cfg, rng, sizes)
    b = rng.normal(0.0, cfg.sd(cfg.sigma), size=m1)
    # A = 1 iff U < expit(gamma + eta)  <=>  logit(U) - eta < gamma
    thresh = logit(rng.random(l1.shape[0])) - treatment_logit(cfg, l1, l2, 0.0) - np.repeat(b, sizes)
    del l1, l2
    thresh.sort()
    gammas = np.arange(grid[0], grid[1] + grid_step / 2, grid_step)
    fractions = np.searchsorted(thresh, gammas, side="left") / thresh.shape[0]
    below = np.flatnonzero(fractions < alpha)
    above = np.flatnonzero(fractions > alpha)
    if below.size == 0 or above.size == 0:
        raise ConfigurationError(f"alpha={alpha} is not bracketed by the intercept grid {grid}; extend it")
    return float(0.5 * (gammas[below.max()] + gammas[above.min()]))


def truth_omega(cfg: DgpConfig, alpha: float, gamma0: float, n: int, m2: int = 10**6,
                seed: int | None = None, chunk: int = 200_000) -> np.ndarray:
    """Stratum frequencies of policy treatments over ``m2`` simulated size-``n`` clusters.

    The stream does not depend on ``alpha``, so policies share random numbers.
    """
    del alpha  # the policy enters through gamma0 only
    seed = cfg.seed if seed is None else seed
    rng = stream(seed, _TRUTH_OMEGA, n)
    counts = np.zeros(n + 1, dtype=np.int64)
    for m in _chunks(m2, chunk):
        sizes = np.full(m, n, dtype=np.int64)
        l1, l2 = draw_covariates(cfg, rng, sizes)
        b = rng.normal(0.0, cfg.sd(cfg.sigma), size=m)
        p = expit(treatment_logit(cfg, l1, l2, gamma0).reshape(m, n) + b[:, None])
        s = (rng.random((m, n)) < p).sum(axis=1)
        counts += np.bincount(s, minlength=n + 1)
    return counts / m2


def canonical_vector(n: int, s: int) -> np.ndarray:
    """``s`` ones followed by ``n - s`` zeros."""
    return (np.arange(n) < s).astype(np.int8)


def _arm_means(y: np.ndarray, a: np.ndarray):
    """Cluster mean, untreated mean, treated mean of rows of ``y`` under vector ``a`` (zero if arm empty)."""
    ybar = y.mean(axis=1)
    n1 = int(a.sum())
    n0 = a.shape[0] - n1
    y1 = y[:, a == 1].mean(axis=1) if n1 else np.zeros(y.shape[0])
    y0 = y[:, a == 0].mean(axis=1) if n0 else np.zeros(y.shape[0])
    return ybar, y0, y1


def truth_potential_outcomes(cfg: DgpConfig, n: int, m3: int = 10**6, seed: int | None = None,
                             expected: bool = False, chunk: int = 100_000):
    """Mean potential outcomes under each canonical vector with ``s`` ones.

    Returns three arrays of length ``n + 1``: overall, untreated-arm and
    treated-arm cluster means averaged over ``m3`` clusters. With
    ``expected=True`` the Bernoulli draw is replaced by its mean.
    """
    seed = cfg.seed if seed is None else seed
    rng = stream(seed, _TRUTH_OUTCOME, n)
    tot = np.zeros((3, n + 1))
    for m in _chunks(m3, chunk):
        sizes = np.full(m, n, dtype=np.int64)
        l1, l2 = draw_covariates(cfg, rng, sizes)
        l1, l2 = l1.reshape(m, n), l2.reshape(m, n)
        u = None if expected else rng.random((m, n))
        for s in range(n + 1):
            a = canonical_vector(n, s)
            g = others_treated_fraction(s, a, n)
            p = outcome_prob(cfg, l1, l2, a[None, :], g[None, :])
            y = p if expected else (u < p).astype(float)
            for row, v in enumerate(_arm_means(y, a)):
                tot[row, s] += v.sum()
    out = tot / m3
    return out[0], out[1], out[2]


@dataclass(eq=False)
class TruthTable:
    """Components of the true estimand values and their assembly."""

    alphas: tuple
    size_probs: dict
    gamma0: dict
    omega: dict                   # alpha -> n -> vector (n+1)
    outcomes: dict                # n -> (ybar, y0, y1) each (n+1)
    sample_sizes: dict = field(default_factory=dict)
    method: str = "simulation"

    def mean(self, arm: int | None, alpha: float, type_b: bool = False) -> float:
        row = 0 if arm is None else arm + 1
        total = 0.0
        for n, pn in self.size_probs.items():
            w = type_b_weights(alpha, n) if type_b else self.omega[alpha][n]
            total += pn * float(np.dot(self.outcomes[n][row], w))
        return total

    def value(self, spec: EstimandSpec) -> float:
        one = lambda a: self.mean(spec.arm, a, spec.is_type_b)  # noqa: E731
        if spec.is_contrast:
            return one(spec.alpha) - one(spec.alpha_prime)
        return one(spec.alpha)

    def to_frame(self, specs) -> pd.DataFrame:
        return pd.DataFrame(
            [{"estimand": s.label, "kind": s.kind, "alpha": s.alpha,
              "alpha_prime": s.alpha_prime, "truth": self.value(s)} for s in specs]
        )

    def omega_frame(self) -> pd.DataFrame:
        rows = []
        for a in self.alphas:
            for n, vec in self.omega[a].items():
                for s, w in enumerate(vec):
                    rows.append({"alpha": a, "n": n, "s": s, "omega": w})
        return pd.DataFrame(rows)


def assemble_truth(cfg: DgpConfig, alphas=(0.4, 0.5, 0.55), m1: int = 10**6, m2: int = 10**6,
                   m3: int = 10**6, seed: int | None = None, expected_outcomes: bool = False) -> TruthTable:
    """Truth by simulation: intercepts on a grid, stratum frequencies, potential outcomes."""
    alphas = tuple(float(a) for a in alphas)
    gamma0 = {a: truth_gamma0(cfg, a, m1, seed=seed) for a in alphas}
    omega = {a: {n: truth_omega(cfg, a, gamma0[a], n, m2, seed=seed) for n in cfg.sizes} for a in alphas}
    outcomes = {n: truth_potential_outcomes(cfg, n, m3, seed=seed, expected=expected_outcomes) for n in cfg.sizes}
    return TruthTable(alphas, dict(zip(cfg.sizes, cfg.size_probs)), gamma0, omega, outcomes,
                      {"m1": m1, "m2": m2, "m3": m3})


def quadrature_truth(cfg: DgpConfig, alphas=(0.4, 0.5, 0.55), m_cov: int = 20_000,
                     rule: QuadratureRule | None = None, seed: int | None = None,
                     chunk: int = 2_000) -> TruthTable:
    """Truth by integration: only the covariates are simulated.

    Intercepts solve the marginal-probability equation over a large covariate
    sample at the true parameters; stratum probabilities are integrated over
    the random intercept and summed over every vector of each stratum;
    potential-outcome means use outcome probabilities, not draws.
    """
    rule = gauss_hermite() if rule is None else rule
    seed = cfg.seed if seed is None else seed
    alphas = tuple(float(a) for a in alphas)
    params = cfg.true_params
    rng = stream(seed, _TRUTH_QUAD)

    sizes = draw_sizes(cfg, rng, m_cov)
    l1, l2 = draw_covariates(cfg, rng, sizes)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    zeros = np.zeros(l1.shape[0])
    mixed = ClusterBatch(np.column_stack([l1, l2]), zeros.astype(np.int8), zeros, sizes, starts)
    gamma0 = {a: solve_gamma0(params, a, mixed, rule).gamma0 for a in alphas}

    omega = {a: {} for a in alphas}
    outcomes = {}
    for n in cfg.sizes:
        sums = {a: np.zeros(n + 1) for a in alphas}
        tot = np.zeros((3, n + 1))
        for m in _chunks(m_cov, chunk):
            f1, f2 = draw_covariates(cfg, rng, np.full(m, n, dtype=np.int64))
            X = np.stack([f1.reshape(m, n), f2.reshape(m, n)], axis=2)
            group = SizeGroup(n, np.arange(m), X)
            for a in alphas:
                sums[a] += stratum_sums(params, gamma0[a], group, range(n + 1), rule).sum(axis=0)
            for s in range(n + 1):
                av = canonical_vector(n, s)
                p = outcome_prob(cfg, X[:, :, 0], X[:, :, 1], av[None, :],
                                 others_treated_fraction(s, av, n)[None, :])
                for row, v in enumerate(_arm_means(p, av)):
                    tot[row, s] += v.sum()
        for a in alphas:
            omega[a][n] = sums[a] / m_cov
        outcomes[n] = tuple(tot / m_cov)
    return TruthTable(alphas, dict(zip(cfg.sizes, cfg.size_probs)), gamma0, omega, outcomes,
                      {"m_cov": m_cov, "Q": rule.Q}, method="quadrature")


# --------------------------------------------------------------------------
# replication harness

def replicate_seed(seed: int, replicate: int) -> int:
    """Stratum-sampling seed for one replicate, derived from the master seed."""
    return int(np.random.SeedSequence(seed, spawn_key=(int(replicate), 99)).generate_state(1)[0])


def run_replicate(cfg: DgpConfig, replicate: int, specs, k: int | None = 1,
                  rule: QuadratureRule | None = None, level: float = 0.95) -> list[dict]:
    """Simulate one dataset, fit, and estimate ``specs``; one row per estimand."""
    from .estimators import estimate_many
    from .propensity import fit_mle

    clusters = generate_dataset(cfg, replicate)
    params = fit_mle(clusters, rule)
    run = estimate_many(specs, clusters, params, rule, k=k, seed=replicate_seed(cfg.seed, replicate), level=level)
    return [{"replicate": replicate, "estimand": r.spec.label, "point": r.point, "std_error": r.std_error,
             "ci_lower": r.ci_lower, "ci_upper": r.ci_upper} for r in run.reports]


def _replicate_task(args):
    cfg, r, specs, k, Q, level = args
    from .errors import ClusterIPWError
    try:
        with np.errstate(all="ignore"):
            return r, run_replicate(cfg, r, specs, k, gauss_hermite(Q), level), None
    except (ClusterIPWError, np.linalg.LinAlgError, FloatingPointError) as err:
        return r, [], f"{type(err).__name__}: {err}"


@dataclass(eq=False)
class ReplicationReport:
    summary: pd.DataFrame
    replicates: pd.DataFrame
    failures: dict
    R: int

    @property
    def n_failed(self) -> int:
        return len(self.failures)


def summarize_replicates(rows: pd.DataFrame, truth: dict, specs) -> pd.DataFrame:
    """Truth, Bias, Cov%, ASE, ESE and SER per estimand, in ``specs`` order."""
    out = []
    for s in specs:
        d = rows[rows["estimand"] == s.label]
        t = truth[s.label]
        ese = float(d["point"].std(ddof=1)) if len(d) > 1 else float("nan")
        ase = float(d["std_error"].mean())
        cover = ((d["ci_lower"] <= t) & (t <= d["ci_upper"])).mean() * 100
        out.append({"estimand": s.label, "truth": t, "bias": float(d["point"].mean()) - t,
                    "coverage": float(cover), "ase": ase, "ese": ese,
                    "ser": ase / ese if ese > 0 else float("nan"), "n": int(len(d))})
    return pd.DataFrame(out)


def replicate_study(cfg: DgpConfig, R: int, truth: dict, specs, k: int | None = 1, Q: int = 25,
                    level: float = 0.95, threads: int = 1, max_failure_rate: float = 0.05,
                    progress=None) -> ReplicationReport:
    """Run ``R`` replicates and summarize against ``truth`` (label -> value).

    Failed replicates are excluded and counted; more than ``max_failure_rate``
    of them raises :class:`ReplicationError`.
    """
    from .errors import ReplicationError

    specs = list(specs)
    missing = [s.label for s in specs if s.label not in truth]
    if missing:
        raise ConfigurationError(f"no truth value for {missing}")
    tasks = [(cfg, r, specs, k, Q, level) for r in range(R)]
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_replicate_task, tasks))
    else:
        results = []
        for t in tasks:
            results.append(_replicate_task(t))
            if progress is not None:
                progress(t[1])
    results.sort(key=lambda x: x[0])
    rows = [row for _, rr, _ in results for row in rr]
    failures = {r: msg for r, _, msg in results if msg is not None}
    for r, msg in failures.items():
        logger.warning("replicate %d failed: %s", r, msg)
    if len(failures) > max_failure_rate * R:
        raise ReplicationError(f"{len(failures)} of {R} replicates failed (limit {max_failure_rate:.0%})")
    frame = pd.DataFrame(rows, columns=["replicate", "estimand", "point", "std_error", "ci_lower", "ci_upper"])
    return ReplicationReport(summarize_replicates(frame, truth, specs), frame, failures, R)
