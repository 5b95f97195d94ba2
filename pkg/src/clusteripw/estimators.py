"""IPW point estimators and Wald intervals for policy means and contrasts."""

from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .data import ClusterData, as_batch
from .errors import ClusterIPWError, ConfigurationError, CoverageError, PositivityError
from .estimands import EstimandSpec
from .mestimation import IPWStack, SandwichResult, ThetaStack, build_stack
from .policy import CounterfactualWeights
from .propensity import PropensityParams, QuadratureRule, _rule, log_propensity_batch

logger = logging.getLogger(__name__)


def cluster_avg_outcome(cluster: ClusterData) -> float:
    return float(np.mean(cluster.outcome))


def cluster_avg_outcome_by_arm(cluster: ClusterData, t: int) -> float:
    """Mean outcome among members with treatment ``t``; 0 if there are none."""
    if t not in (0, 1):
        raise ConfigurationError(f"arm must be 0 or 1, got {t}")
    mask = cluster.treatment == t
    return float(cluster.outcome[mask].mean()) if mask.any() else 0.0


def _outcomes(cluster: ClusterData, arm):
    return cluster_avg_outcome(cluster) if arm is None else cluster_avg_outcome_by_arm(cluster, arm)


def _weight(w: CounterfactualWeights | None, alpha: float, type_b: bool, s: int, n: int) -> float:
    if type_b:
        return alpha**s * (1.0 - alpha) ** (n - s)
    if w is None:
        raise ConfigurationError(f"counterfactual weights for alpha={alpha} are required")
    if not math.isclose(w.alpha, alpha, rel_tol=0, abs_tol=1e-12):
        raise ConfigurationError(f"weights are for alpha={w.alpha}, estimand needs alpha={alpha}")
    return w.vector_weight(s, n)


def ipw_point_estimate(spec: EstimandSpec, clusters, params: PropensityParams,
                       weights: CounterfactualWeights | None = None,
                       rule: QuadratureRule | None = None,
                       weights_prime: CounterfactualWeights | None = None) -> float:
    """IPW estimate of ``spec``.

    Parameters
    ----------
    spec : EstimandSpec
    clusters : sequence of ClusterData
    params : PropensityParams
        Fitted propensity model supplying the denominators.
    weights, weights_prime : CounterfactualWeights
        Stratum probabilities for ``spec.alpha`` and (contrasts) ``spec.alpha_prime``.
        Ignored for type-B kinds.

    Returns
    -------
    float
        ``M^-1 sum_i Ybar_i w(A_i) / Pr(A_i | L_i)``; contrasts use the
        weight difference.
    """
    clusters = list(clusters)
    if not clusters:
        raise ConfigurationError("no clusters")
    batch = as_batch(clusters)
    logpr = log_propensity_batch(params, batch, _rule(rule))
    order = sorted(range(len(clusters)), key=lambda i: str(clusters[i].cluster_id))
    total = 0.0
    for i in order:
        c = clusters[i]
        if not np.isfinite(logpr[i]) or math.exp(logpr[i]) == 0.0:
            raise PositivityError(f"cluster {c.cluster_id!r}: propensity of the observed vector is zero")
        s, n = c.n_treated, c.n
        try:
            w = _weight(weights, spec.alpha, spec.is_type_b, s, n)
            if spec.is_contrast:
                w -= _weight(weights_prime, spec.alpha_prime, spec.is_type_b, s, n)
        except CoverageError as err:
            raise CoverageError(f"cluster {c.cluster_id!r}: {err}") from None
        total += _outcomes(c, spec.arm) * w * math.exp(-logpr[i])
    return total / len(clusters)


@dataclass(frozen=True, eq=False)
class EstimateReport:
    """Point estimate, sandwich SE and Wald interval for one estimand.

    ``theta_hat`` and ``sigma_hat`` are shared by every report of one run;
    ``index`` locates the estimand in them.
    """

    spec: EstimandSpec
    point: float
    std_error: float
    ci_lower: float
    ci_upper: float
    level: float
    theta_hat: ThetaStack = field(repr=False)
    sigma_hat: np.ndarray = field(repr=False)
    index: int = -1
    k: int | None = None
    seed: int | None = None

    def as_dict(self) -> dict:
        s = self.spec
        return {
            "estimand": s.label, "kind": s.kind, "alpha": s.alpha,
            "alpha_prime": s.alpha_prime if s.alpha_prime is not None else float("nan"),
            "point": self.point, "std_error": self.std_error,
            "ci_lower": self.ci_lower, "ci_upper": self.ci_upper, "level": self.level,
            "k": self.k if self.k is not None else "all", "seed": self.seed,
        }


def wald_interval(point: float, se: float, level: float) -> tuple[float, float]:
    if not 0.0 < level < 1.0:
        raise ConfigurationError(f"confidence level must lie in (0, 1), got {level}")
    z = stats.norm.ppf(0.5 + level / 2)
    return point - z * se, point + z * se


@contextmanager
def _stage(name: str):
    """Prefix package errors raised inside the block with the pipeline stage."""
    try:
        yield
    except ClusterIPWError as err:
        if err.args and isinstance(err.args[0], str):
            hint = "; increase k, estimate all strata or check the data" if isinstance(err, CoverageError) else ""
            err.args = (f"[{name}] {err.args[0]}{hint}",) + err.args[1:]
        raise


@dataclass(eq=False)
class EstimationRun:
    """Everything produced by one joint estimation."""

    reports: list
    stack: IPWStack
    theta: ThetaStack
    sandwich: SandwichResult | None


def estimate_many(specs: Sequence[EstimandSpec], clusters, params: PropensityParams,
                  rule: QuadratureRule | None = None, k: int | None = None, seed: int = 0,
                  level: float = 0.95, closure: bool = False, all_strata: bool = False,
                  variance: bool = True) -> EstimationRun:
    """Joint estimates for ``specs`` from one stacked system.

    Parameters
    ----------
    k : int or None
        Sampled vectors per stratum; ``None`` sums every vector.
    variance : bool
        Skip the sandwich (SE and interval become NaN) when False.
    """
    specs = list(dict.fromkeys(specs))
    if not specs:
        raise ConfigurationError("no estimands requested")
    with _stage("layout"):
        stack = build_stack(clusters, specs, rule, k=k, seed=seed, closure=closure, all_strata=all_strata)
    with _stage("plug-in"):
        theta = stack.plugin(params)
    sw = None
    if variance:
        with _stage("sandwich"):
            sw = stack.sandwich(theta.values)
    reports = []
    for spec in specs:
        i = stack.target_index(spec)
        point = float(theta.values[i])
        if sw is None:
            se = lo = hi = float("nan")
        else:
            se = sw.std_error(i)
            lo, hi = wald_interval(point, se, level)
        reports.append(EstimateReport(spec, point, se, lo, hi, level, theta,
                                      None if sw is None else sw.Sigma_hat, i, k, seed))
    return EstimationRun(reports, stack, theta, sw)


def estimate_with_ci(spec: EstimandSpec, clusters, params: PropensityParams,
                     rule: QuadratureRule | None = None, k: int | None = None, seed: int = 0,
                     level: float = 0.95, closure: bool = False) -> EstimateReport:
    """Point estimate, sandwich SE and Wald interval for a single estimand."""
    return estimate_many([spec], clusters, params, rule, k, seed, level, closure).reports[0]
