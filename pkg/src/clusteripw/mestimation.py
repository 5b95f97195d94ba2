"""Stacked estimating equations and the empirical sandwich covariance.

The parameter stack is

    theta = (beta0, beta1, sigma, gamma0 per policy, omega(s, n) per policy, targets)

with one estimating function per entry: the propensity-model score, the
marginal-probability equation for each intercept, the stratum-probability
equation for each ``omega`` and the IPW equation for each target. The
covariance of ``theta_hat`` is ``U^-1 W U^-T / M`` with ``U`` the averaged
negative Jacobian (central differences) and ``W`` the averaged outer product
of the estimating functions.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np
from scipy import linalg

from .data import ClusterBatch, ClusterData, as_batch
from .errors import ConfigurationError, CoverageError, NumericalError, PositivityError
from .estimands import EstimandSpec
from .policy import (
    StratumRegistry,
    cluster_mean_treat_prob,
    observed_strata,
    size_groups,
    solve_gamma0,
    stratum_sums,
)
from .propensity import PropensityParams, QuadratureRule, _rule, fd_step, log_propensity_batch, score_batch

logger = logging.getLogger(__name__)

COND_WARN = 1e10
COND_ERROR = 1e14


# --------------------------------------------------------------------------
# generic machinery

@dataclass(eq=False)
class ThetaStack:
    """Ordered parameter vector with a label for each entry."""

    labels: list
    values: np.ndarray
    layout: dict = field(init=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if len(self.labels) != self.values.shape[0]:
            raise ConfigurationError("labels and values differ in length")
        self.layout = {lab: i for i, lab in enumerate(self.labels)}
        if len(self.layout) != len(self.labels):
            raise ConfigurationError("duplicate parameter labels in stack")

    @property
    def q(self) -> int:
        return int(self.values.shape[0])

    def index(self, label: Hashable) -> int:
        return self.layout[label]

    def __getitem__(self, label):
        return self.values[self.layout[label]]

    def with_values(self, values) -> "ThetaStack":
        return ThetaStack(list(self.labels), np.array(values, dtype=float))


@dataclass(eq=False)
class SandwichResult:
    U_hat: np.ndarray
    W_hat: np.ndarray
    Sigma_hat: np.ndarray
    M: int
    condition: float = float("nan")

    @property
    def variance_of_target(self) -> float:
        """Variance estimate of the last stack entry."""
        return self.variance(-1)

    def variance(self, index: int) -> float:
        return float(self.Sigma_hat[index, index]) / self.M

    def std_error(self, index: int) -> float:
        return math.sqrt(max(self.variance(index), 0.0))


def central_jacobian(fun: Callable[[np.ndarray], np.ndarray], theta, rel_step: float = 1e-6) -> np.ndarray:
    """Jacobian of ``fun`` by central differences, step ``rel_step * max(1, |theta_j|)``."""
    theta = np.asarray(theta, dtype=float)
    cols = []
    for j in range(theta.size):
        h = fd_step(theta[j], rel_step)
        up, dn = theta.copy(), theta.copy()
        up[j] += h
        dn[j] -= h
        # divide by the step actually taken after rounding
        cols.append((fun(up) - fun(dn)) / (up[j] - dn[j]))
    return np.column_stack(cols)


def _factor(U: np.ndarray):
    with warnings.catch_warnings():
        # singularity is reported below with the condition number
        warnings.simplefilter("ignore", linalg.LinAlgWarning)
        lu, piv = linalg.lu_factor(U, check_finite=True)
    anorm = np.linalg.norm(U, 1)
    rcond, info = linalg.lapack.dgecon(lu, anorm, norm="1")
    cond = math.inf if rcond == 0 else 1.0 / rcond
    if not np.isfinite(cond) or cond > COND_ERROR or np.any(np.diag(lu) == 0):
        raise NumericalError(f"estimating-equation Jacobian is singular (condition number ~{cond:.3g})",
                             condition=cond)
    if cond > COND_WARN:
        warnings.warn(f"estimating-equation Jacobian is ill-conditioned (condition number ~{cond:.3g})",
                      RuntimeWarning, stacklevel=3)
    return (lu, piv), cond


def sandwich_from(psi_rows: np.ndarray, U: np.ndarray) -> SandwichResult:
    """Sandwich covariance from per-cluster estimating functions (M x q) and ``U``."""
    M = psi_rows.shape[0]
    W = psi_rows.T @ psi_rows / M
    factor, cond = _factor(U)
    left = linalg.lu_solve(factor, W)                  # U^-1 W
    Sigma = linalg.lu_solve(factor, left.T)            # U^-1 (U^-1 W)^T = U^-1 W U^-T
    Sigma = 0.5 * (Sigma + Sigma.T)
    return SandwichResult(U, W, Sigma, M, cond)


def sandwich_generic(psi_matrix: Callable[[np.ndarray], np.ndarray], theta_hat,
                     rel_step: float = 1e-6) -> SandwichResult:
    """Sandwich for any stack given as ``theta -> (M x q)`` estimating functions."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    U = -central_jacobian(lambda t: psi_matrix(t).mean(axis=0), theta_hat, rel_step)
    return sandwich_from(psi_matrix(theta_hat), U)


# --------------------------------------------------------------------------
# the IPW stack

def _policy_alphas(specs: Sequence[EstimandSpec]) -> list[float]:
    out: list[float] = []
    for s in specs:
        if s.is_type_b:
            continue
        for a in s.alphas:
            if a not in out:
                out.append(a)
    return out


@dataclass(frozen=True, eq=False)
class StackLayout:
    """Which parameters the stack carries.

    ``strata`` maps each cluster size to the stratum counts estimated for it.
    With ``closure`` on, a size whose strata are all observed drops
    ``omega(n, n)`` and uses one minus the others in its place.
    """

    p: int
    alphas: tuple
    strata: dict
    targets: tuple
    closure: bool = False

    def closed(self, n: int) -> bool:
        return self.closure and len(self.strata[n]) == n + 1

    def omega_strata(self, n: int) -> list[int]:
        ss = self.strata[n]
        return ss[:-1] if self.closed(n) else list(ss)

    @property
    def labels(self) -> list:
        labs: list = [("beta0",)] + [("beta1", j) for j in range(self.p)] + [("sigma",)]
        labs += [("gamma0", a) for a in self.alphas]
        for a in self.alphas:
            for n in sorted(self.strata):
                labs += [("omega", a, n, s) for s in self.omega_strata(n)]
        labs += [("target", t.label) for t in self.targets]
        return labs


class IPWStack:
    """Estimating equations for a set of targets sharing one fitted propensity model.

    Parameters
    ----------
    clusters : sequence of ClusterData or ClusterBatch
    layout : StackLayout
    rule : QuadratureRule
    registry : StratumRegistry or None
        Sampled stratum vectors; ``None`` sums over every vector.
    """

    def __init__(self, clusters, layout: StackLayout, rule: QuadratureRule | None = None,
                 registry: StratumRegistry | None = None):
        self.batch = as_batch(clusters)
        self.layout = layout
        self.rule = _rule(rule)
        self.registry = registry
        self.labels = layout.labels
        self.index = {lab: i for i, lab in enumerate(self.labels)}
        self.q = len(self.labels)
        self.M = self.batch.M
        self.p = layout.p
        if self.batch.p != self.p:
            raise ConfigurationError("stack layout and data disagree on covariate count")

        b = self.batch
        self.sizes = b.sizes
        self.treated = b.n_treated
        self.groups = {n: g for n, g in size_groups(b).items() if n in layout.strata}
        self.comb = np.array([math.comb(int(n), int(s)) for n, s in zip(self.sizes, self.treated)], dtype=float)
        ybar = b.cluster_sum(b.Y) / self.sizes
        arm = []
        for t in (0, 1):
            mask = (b.A == t)
            cnt = b.cluster_sum(mask.astype(float))
            tot = b.cluster_sum(b.Y * mask)
            arm.append(np.divide(tot, cnt, out=np.zeros_like(tot), where=cnt > 0))
        self.outcomes = {None: ybar, 0: arm[0], 1: arm[1]}
        self._omega_index = {a: self._cluster_omega_index(a) for a in layout.alphas}
        self._cache_key = None
        self._cache = None

    # -- indices -----------------------------------------------------------
    def _cluster_omega_index(self, alpha):
        """Stack index of omega(N_i, f(A_i)) for each cluster; -1 = closure entry, -2 = absent."""
        idx = np.full(self.M, -2, dtype=np.int64)
        for i, (n, s) in enumerate(zip(self.sizes.tolist(), self.treated.tolist())):
            if n not in self.layout.strata:
                continue
            if self.layout.closed(n) and s == n:
                idx[i] = -1
            else:
                idx[i] = self.index.get(("omega", alpha, n, s), -2)
        return idx

    def _nu_slice(self):
        return slice(0, self.p + 2)

    def params_from(self, theta) -> PropensityParams:
        return PropensityParams.from_vector(theta[: self.p + 2])

    # -- parts that need quadrature ------------------------------------------
    def _expensive(self, theta):
        key = tuple(theta[: self.p + 2]) + tuple(theta[self.index[("gamma0", a)]] for a in self.layout.alphas)
        if key == self._cache_key:
            return self._cache
        params = self.params_from(theta)
        parts = {
            "logpr": log_propensity_batch(params, self.batch, self.rule),
            "score": score_batch(params, self.batch, self.rule),
            "treat": {},
            "strata": {},
        }
        for a in self.layout.alphas:
            g0 = theta[self.index[("gamma0", a)]]
            parts["treat"][a] = cluster_mean_treat_prob(params, g0, self.batch, self.rule)
            parts["strata"][a] = {
                n: stratum_sums(params, g0, grp, self.layout.omega_strata(n), self.rule, self.registry)
                for n, grp in self.groups.items()
            }
        zero = ~np.isfinite(parts["logpr"]) | (np.exp(parts["logpr"]) == 0.0)
        if zero.any():
            i = int(np.flatnonzero(zero)[0])
            raise PositivityError(f"cluster {self.batch.ids[i] if self.batch.ids else i!r}: "
                                  "propensity of the observed vector is zero")
        self._cache_key, self._cache = key, parts
        return parts

    # -- weights -----------------------------------------------------------
    def _vector_weights(self, theta, spec_alpha, type_b):
        """Policy probability of each cluster's observed vector."""
        if type_b:
            s, n = self.treated, self.sizes
            return spec_alpha ** s * (1.0 - spec_alpha) ** (n - s)
        idx = self._omega_index[spec_alpha]
        if np.any(idx == -2):
            i = int(np.flatnonzero(idx == -2)[0])
            raise CoverageError(f"omega(s={self.treated[i]}, n={self.sizes[i]}) is not in the stack "
                                f"for alpha={spec_alpha}")
        omega = np.where(idx >= 0, theta[np.maximum(idx, 0)], 0.0)
        if np.any(idx == -1):
            for n in self.groups:
                if self.layout.closed(n):
                    block = [self.index[("omega", spec_alpha, n, s)] for s in self.layout.omega_strata(n)]
                    omega = np.where((idx == -1) & (self.sizes == n), 1.0 - theta[block].sum(), omega)
        return omega / self.comb

    def _target_terms(self, theta, parts):
        """Per-cluster IPW contributions (before subtracting the target), shape (M, n_targets)."""
        inv_pr = np.exp(-parts["logpr"])
        cols = []
        for t in self.layout.targets:
            y = self.outcomes[t.arm]
            w = self._vector_weights(theta, t.alpha, t.is_type_b)
            if t.is_contrast:
                w = w - self._vector_weights(theta, t.alpha_prime, t.is_type_b)
            cols.append(y * w * inv_pr)
        return np.column_stack(cols) if cols else np.zeros((self.M, 0))

    # -- estimating functions ------------------------------------------------
    def psi_matrix(self, theta) -> np.ndarray:
        """Estimating functions for every cluster, shape (M, q)."""
        theta = np.asarray(theta, dtype=float)
        parts = self._expensive(theta)
        out = np.zeros((self.M, self.q))
        out[:, self._nu_slice()] = parts["score"]
        for a in self.layout.alphas:
            out[:, self.index[("gamma0", a)]] = parts["treat"][a] - a
            for n, grp in self.groups.items():
                cols = [self.index[("omega", a, n, s)] for s in self.layout.omega_strata(n)]
                if cols:
                    out[np.ix_(grp.index, cols)] = parts["strata"][a][n] - theta[cols][None, :]
        tcols = [self.index[("target", t.label)] for t in self.layout.targets]
        out[:, tcols] = self._target_terms(theta, parts) - theta[tcols][None, :]
        return out

    def mean_psi(self, theta) -> np.ndarray:
        """Average of :meth:`psi_matrix` without forming the M x q matrix."""
        theta = np.asarray(theta, dtype=float)
        parts = self._expensive(theta)
        out = np.zeros(self.q)
        out[self._nu_slice()] = parts["score"].mean(axis=0)
        for a in self.layout.alphas:
            out[self.index[("gamma0", a)]] = parts["treat"][a].mean() - a
            for n, grp in self.groups.items():
                cols = [self.index[("omega", a, n, s)] for s in self.layout.omega_strata(n)]
                if cols:
                    frac = grp.index.size / self.M
                    out[cols] = parts["strata"][a][n].sum(axis=0) / self.M - frac * theta[cols]
        tcols = [self.index[("target", t.label)] for t in self.layout.targets]
        out[tcols] = self._target_terms(theta, parts).mean(axis=0) - theta[tcols]
        return out

    # -- plug-in estimate --------------------------------------------------
    def plugin(self, params: PropensityParams, tol: float = 1e-10) -> ThetaStack:
        """Plug-in estimates: fitted model, solved intercepts, stratum averages, IPW targets."""
        theta = np.zeros(self.q)
        theta[self._nu_slice()] = params.to_vector()
        for a in self.layout.alphas:
            theta[self.index[("gamma0", a)]] = solve_gamma0(params, a, self.batch, self.rule, tol).gamma0
        parts = self._expensive(theta)
        for a in self.layout.alphas:
            for n, grp in self.groups.items():
                cols = [self.index[("omega", a, n, s)] for s in self.layout.omega_strata(n)]
                theta[cols] = parts["strata"][a][n].mean(axis=0)
        tcols = [self.index[("target", t.label)] for t in self.layout.targets]
        theta[tcols] = self._target_terms(theta, parts).mean(axis=0)
        return ThetaStack(list(self.labels), theta)

    def jacobian_U(self, theta, rel_step: float = 1e-6) -> np.ndarray:
        """``U = -M^-1 sum_i d psi_i / d theta`` by central differences."""
        return -central_jacobian(self.mean_psi, np.asarray(theta, dtype=float), rel_step)

    def sandwich(self, theta, rel_step: float = 1e-6) -> SandwichResult:
        theta = np.asarray(theta, dtype=float)
        U = self.jacobian_U(theta, rel_step)
        return sandwich_from(self.psi_matrix(theta), U)

    def target_index(self, spec: EstimandSpec) -> int:
        return self.index[("target", spec.label)]


def build_stack(clusters, specs: Sequence[EstimandSpec], rule: QuadratureRule | None = None,
                k: int | None = None, seed: int = 0, closure: bool = False, all_strata: bool = False,
                registry: StratumRegistry | None = None) -> IPWStack:
    """Stack covering ``specs``; ``k=None`` means exhaustive stratum sums."""
    batch = as_batch(clusters)
    specs = tuple(dict.fromkeys(specs))
    alphas = tuple(_policy_alphas(specs))
    strata = observed_strata(batch, all_strata) if alphas else {}
    layout = StackLayout(batch.p, alphas, strata, specs, closure)
    if registry is None and k is not None:
        registry = StratumRegistry(k, seed)
    return IPWStack(batch, layout, rule, registry)


def psi(cluster: ClusterData, theta, ctx: IPWStack) -> np.ndarray:
    """Estimating functions of one cluster under the layout and sample registry of ``ctx``."""
    theta = theta.values if isinstance(theta, ThetaStack) else np.asarray(theta, dtype=float)
    if theta.shape[0] != ctx.q:
        raise ConfigurationError(f"theta has {theta.shape[0]} entries, layout expects {ctx.q}")
    one = IPWStack([cluster], ctx.layout, ctx.rule, ctx.registry)
    return one.psi_matrix(theta)[0]


def jacobian_U(clusters, theta, ctx: IPWStack) -> np.ndarray:
    stack = ctx if clusters is None else IPWStack(clusters, ctx.layout, ctx.rule, ctx.registry)
    theta = theta.values if isinstance(theta, ThetaStack) else theta
    return stack.jacobian_U(theta)


def sandwich(clusters, theta, ctx: IPWStack) -> SandwichResult:
    stack = ctx if clusters is None else IPWStack(clusters, ctx.layout, ctx.rule, ctx.registry)
    theta = theta.values if isinstance(theta, ThetaStack) else theta
    return stack.sandwich(theta)
