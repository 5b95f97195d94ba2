"""Logistic random-intercept propensity model.

The cluster propensity score is

    Pr(A = a | L, N) = int prod_j expit(eta_j + b)^a_j (1 - expit(eta_j + b))^(1 - a_j) dPhi(b; sigma)

with ``eta_j = beta0 + L_j @ beta1`` and ``b ~ N(0, sigma)``. The integral is
evaluated with a Gauss-Hermite rule after substituting ``b = sqrt(2) sigma x``;
the product over individuals is accumulated on the log scale.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy import optimize
from scipy.special import expit, logsumexp

from .data import ClusterBatch, ClusterData, as_batch
from .errors import ConfigurationError, NumericalError, OptimizationError, SeparationError

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)
DEFAULT_NODES = 25


@dataclass(frozen=True, eq=False)
class PropensityParams:
    """Parameters ``(beta0, beta1, sigma)`` of the treatment model."""

    beta0: float
    beta1: np.ndarray
    sigma: float

    def __post_init__(self):
        b1 = np.atleast_1d(np.asarray(self.beta1, dtype=float)).reshape(-1)
        object.__setattr__(self, "beta0", float(self.beta0))
        object.__setattr__(self, "beta1", b1)
        object.__setattr__(self, "sigma", float(self.sigma))
        if self.sigma < 0:
            raise ConfigurationError(f"sigma must be nonnegative, got {self.sigma}")
        if not (np.isfinite(self.beta0) and np.all(np.isfinite(b1)) and np.isfinite(self.sigma)):
            raise ConfigurationError("propensity parameters must be finite")

    @property
    def p(self) -> int:
        return int(self.beta1.shape[0])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.beta0], self.beta1, [self.sigma]])

    @classmethod
    def from_vector(cls, v) -> "PropensityParams":
        v = np.asarray(v, dtype=float)
        return cls(v[0], v[1:-1], abs(v[-1]))

    def names(self) -> list[str]:
        return ["beta0"] + [f"beta1[{j}]" for j in range(self.p)] + ["sigma"]

    def with_intercept(self, beta0: float) -> "PropensityParams":
        return PropensityParams(beta0, self.beta1, self.sigma)


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Gauss-Hermite nodes and weights for weight function ``exp(-x**2)``."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float).reshape(-1)
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if nodes.size < 1 or nodes.shape != weights.shape:
            raise ConfigurationError("quadrature rule needs matching nonempty nodes and weights")
        if np.any(weights <= 0):
            raise ConfigurationError("quadrature weights must be positive")
        if abs(weights.sum() - math.sqrt(math.pi)) > 1e-10:
            raise ConfigurationError("Gauss-Hermite weights must sum to sqrt(pi)")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def Q(self) -> int:
        return int(self.nodes.shape[0])

    def abscissae(self, sigma: float) -> np.ndarray:
        """Random-intercept values ``b_q = sqrt(2) sigma x_q``."""
        return SQRT2 * sigma * self.nodes

    @cached_property
    def log_weights(self) -> np.ndarray:
        """Log of the weights normalized to sum to one (Normal measure)."""
        return np.log(self.weights) - 0.5 * math.log(math.pi)

    @cached_property
    def prob_weights(self) -> np.ndarray:
        return self.weights / math.sqrt(math.pi)


def gauss_hermite(Q: int = DEFAULT_NODES) -> QuadratureRule:
    if Q < 1:
        raise ConfigurationError("need at least one quadrature node")
    x, w = hermgauss(Q)
    return QuadratureRule(x, w)


def _rule(rule):
    return gauss_hermite() if rule is None else rule


def linear_predictor(params: PropensityParams, covariate_row, b: float = 0.0) -> float:
    """Return ``beta0 + beta1 @ L_j + b``."""
    row = np.atleast_1d(np.asarray(covariate_row, dtype=float))
    if row.shape != params.beta1.shape:
        raise ConfigurationError(
            f"covariate row has {row.shape[0]} entries, model has {params.p} coefficients"
        )
    return float(params.beta0 + row @ params.beta1 + b)


def _check_dims(params: PropensityParams, p: int):
    if params.p != p:
        raise ConfigurationError(f"data have {p} covariates, model has {params.p} coefficients")


# --------------------------------------------------------------------------
# vectorized kernels over a ClusterBatch

def node_logits(beta0, beta1, sigma, X, rule: QuadratureRule) -> np.ndarray:
    """Linear predictor at every quadrature node, shape (individuals, Q)."""
    eta = beta0 + X @ beta1
    return eta[:, None] + rule.abscissae(sigma)[None, :]


def _log_terms(Z: np.ndarray, A: np.ndarray) -> np.ndarray:
    # log expit(z) if a == 1 else log(1 - expit(z))
    sgn = (2.0 * A - 1.0)[:, None]
    return -np.logaddexp(0.0, -sgn * Z)


def log_propensity_batch(params: PropensityParams, batch: ClusterBatch, rule: QuadratureRule,
                         A: np.ndarray | None = None, beta0: float | None = None) -> np.ndarray:
    """Log cluster propensity of treatment vector ``A`` (default: observed) per cluster.

    ``beta0`` overrides the intercept, which is how counterfactual scores are
    evaluated.
    """
    _check_dims(params, batch.p)
    A = batch.A if A is None else A
    b0 = params.beta0 if beta0 is None else beta0
    Z = node_logits(b0, params.beta1, params.sigma, batch.X, rule)
    per_node = batch.cluster_sum(_log_terms(Z, A)) + rule.log_weights[None, :]
    return logsumexp(per_node, axis=1)


def score_batch(params: PropensityParams, batch: ClusterBatch, rule: QuadratureRule) -> np.ndarray:
    """Per-cluster gradient of the log likelihood in ``(beta0, beta1, sigma)``, shape (M, p+2).

    Differentiates the quadrature approximation itself, so it is the exact
    gradient of :func:`log_propensity_batch`.
    """
    _check_dims(params, batch.p)
    Z = node_logits(params.beta0, params.beta1, params.sigma, batch.X, rule)
    per_node = batch.cluster_sum(_log_terms(Z, batch.A)) + rule.log_weights[None, :]
    post = np.exp(per_node - logsumexp(per_node, axis=1, keepdims=True))
    R = batch.A[:, None] - expit(Z)
    g0 = batch.cluster_sum(R)
    g1 = batch.cluster_sum(R[:, :, None] * batch.X[:, None, :])
    gs = g0 * (SQRT2 * rule.nodes)[None, :]
    out = np.empty((batch.M, params.p + 2))
    out[:, 0] = np.sum(post * g0, axis=1)
    out[:, 1:-1] = np.einsum("mq,mqk->mk", post, g1)
    out[:, -1] = np.sum(post * gs, axis=1)
    return out


# --------------------------------------------------------------------------
# single-cluster API

def _binary(a, n):
    a = np.asarray(a).reshape(-1)
    if a.shape[0] != n or not np.all((a == 0) | (a == 1)):
        raise ConfigurationError(f"treatment vector must be binary of length {n}")
    return a.astype(np.int8)


def cluster_propensity(params: PropensityParams, cluster: ClusterData, a=None,
                       rule: QuadratureRule | None = None) -> float:
    """Probability of treatment vector ``a`` (default: observed) for one cluster."""
    rule = _rule(rule)
    a = cluster.treatment if a is None else _binary(a, cluster.n)
    batch = ClusterBatch.from_clusters([cluster])
    return float(np.exp(log_propensity_batch(params, batch, rule, A=a)[0]))


def cluster_log_likelihood(params: PropensityParams, cluster: ClusterData,
                           rule: QuadratureRule | None = None) -> float:
    rule = _rule(rule)
    value = float(log_propensity_batch(params, ClusterBatch.from_clusters([cluster]), rule)[0])
    if not np.isfinite(value):
        raise NumericalError(f"cluster {cluster.cluster_id!r}: propensity underflowed to zero")
    return value


def fd_step(x: float, rel: float = 1e-6) -> float:
    return rel * max(1.0, abs(x))


def score(params: PropensityParams, cluster: ClusterData, rule: QuadratureRule | None = None,
          method: str = "analytic") -> np.ndarray:
    """Gradient of the cluster log likelihood in ``(beta0, beta1..., sigma)``.

    ``method="fd"`` uses central differences with step ``1e-6 * max(1, |theta_j|)``.
    """
    rule = _rule(rule)
    if method == "analytic":
        g = score_batch(params, ClusterBatch.from_clusters([cluster]), rule)[0]
    elif method == "fd":
        theta = params.to_vector()
        g = np.empty_like(theta)
        for j in range(theta.size):
            h = fd_step(theta[j])
            up, dn = theta.copy(), theta.copy()
            up[j] += h
            dn[j] -= h
            f_up = cluster_log_likelihood(PropensityParams.from_vector(up), cluster, rule)
            f_dn = cluster_log_likelihood(PropensityParams.from_vector(dn), cluster, rule)
            g[j] = (f_up - f_dn) / (2 * h)
    else:
        raise ConfigurationError(f"unknown score method {method!r}")
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        raise NumericalError(f"non-finite score component {bad[0]}", index=int(bad[0]))
    return g


def total_log_likelihood(params: PropensityParams, clusters, rule: QuadratureRule | None = None) -> float:
    return float(np.sum(log_propensity_batch(params, as_batch(clusters), _rule(rule))))


# --------------------------------------------------------------------------
# maximum likelihood

@dataclass(eq=False)
class FitResult:
    """Fitted parameters plus optimizer diagnostics."""

    params: PropensityParams
    loglik: float
    grad_norm: float
    n_iter: int
    converged: bool
    history: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "beta0": self.params.beta0,
            "beta1": self.params.beta1.tolist(),
            "sigma": self.params.sigma,
            "loglik": self.loglik,
            "grad_norm": self.grad_norm,
            "n_iter": self.n_iter,
            "converged": self.converged,
        }


class _Objective:
    """Negative log likelihood in ``u = (beta0, beta1, log sigma)`` on centered covariates."""

    def __init__(self, batch: ClusterBatch, rule: QuadratureRule):
        self.center = batch.X.mean(axis=0)
        self.batch = ClusterBatch(batch.X - self.center, batch.A, batch.Y, batch.sizes, batch.starts)
        self.rule = rule
        self.p = batch.p

    def to_params(self, u) -> PropensityParams:
        # undo centering: beta0 = beta0_c - center @ beta1
        b1 = u[1:-1]
        return PropensityParams(u[0] - self.center @ b1, b1, math.exp(u[-1]))

    def from_params(self, params: PropensityParams) -> np.ndarray:
        sig = max(params.sigma, 1e-8)
        return np.concatenate([[params.beta0 + self.center @ params.beta1], params.beta1, [math.log(sig)]])

    def _centered(self, u):
        return PropensityParams(u[0], u[1:-1], math.exp(u[-1]))

    def value(self, u) -> float:
        ll = log_propensity_batch(self._centered(u), self.batch, self.rule)
        return -float(np.sum(ll))

    def grad(self, u) -> np.ndarray:
        g = score_batch(self._centered(u), self.batch, self.rule).sum(axis=0)
        g[-1] *= math.exp(u[-1])
        return -g

    def natural_grad(self, u) -> np.ndarray:
        """Gradient of the log likelihood in natural ``(beta0, beta1, log sigma)``."""
        g = -self.grad(u)
        out = g.copy()
        out[1:-1] = g[1:-1] + self.center * g[0]
        return out

    def hessian(self, u) -> np.ndarray:
        k = u.size
        H = np.empty((k, k))
        for j in range(k):
            h = fd_step(u[j], 1e-5)
            up, dn = u.copy(), u.copy()
            up[j] += h
            dn[j] -= h
            H[:, j] = (self.grad(up) - self.grad(dn)) / (2 * h)
        return 0.5 * (H + H.T)


def _logistic_start(obj: _Objective) -> np.ndarray:
    # ordinary logistic regression ignoring clustering
    X1 = np.column_stack([np.ones(obj.batch.X.shape[0]), obj.batch.X])
    A = obj.batch.A.astype(float)

    def nll(beta):
        z = X1 @ beta
        return float(np.sum(np.logaddexp(0.0, z) - A * z))

    def grad(beta):
        return X1.T @ (expit(X1 @ beta) - A)

    res = optimize.minimize(nll, np.zeros(X1.shape[1]), jac=grad, method="BFGS",
                            options={"gtol": 1e-8, "maxiter": 1000})
    return res.x


def fit_mle(clusters, rule: QuadratureRule | None = None, init: PropensityParams | None = None,
            tol: float = 1e-6, max_iter: int = 500, full_output: bool = False):
    """Maximum-likelihood fit of ``(beta0, beta1, sigma)``.

    Quasi-Newton (BFGS) ascent on ``(beta0, beta1, log sigma)`` followed by
    Newton polishing; converged when the max-norm of the log-likelihood
    gradient on that scale is below ``tol``.

    Returns
    -------
    PropensityParams, or FitResult when ``full_output`` is true.
    """
    rule = _rule(rule)
    batch = as_batch(clusters)
    if batch.M < 2:
        raise ConfigurationError("need at least two clusters to fit the propensity model")
    n_treated = int(batch.A.sum())
    if n_treated == 0 or n_treated == batch.A.shape[0]:
        raise SeparationError("all individuals share the same treatment; model not identified")

    obj = _Objective(batch, rule)
    if init is None:
        beta = _logistic_start(obj)
        u = np.concatenate([beta, [math.log(0.5)]])
    else:
        _check_dims(init, batch.p)
        u = obj.from_params(init)

    history = [-obj.value(u)]
    res = optimize.minimize(obj.value, u, jac=obj.grad, method="BFGS",
                            callback=lambda xk: history.append(-obj.value(xk)),
                            options={"gtol": tol * 1e-2, "maxiter": max_iter})
    u = res.x
    n_iter = int(res.nit)
    g = obj.natural_grad(u)
    f = obj.value(u)

    # Newton polish with backtracking; BFGS often stalls on precision loss
    while np.max(np.abs(g)) >= tol and n_iter < max_iter:
        H = obj.hessian(u)
        try:
            step = np.linalg.solve(H, -obj.grad(u))
        except np.linalg.LinAlgError:
            step = -obj.grad(u)
        t, accepted = 1.0, False
        gn = np.max(np.abs(g))
        # near the optimum the decrease in f falls below rounding; accept then on gradient reduction
        slack = 64 * np.finfo(float).eps * max(1.0, abs(f))
        while t > 1e-10:
            cand = u + t * step
            fc = obj.value(cand)
            if np.isfinite(fc) and (fc <= f or (fc <= f + slack
                                                and np.max(np.abs(obj.natural_grad(cand))) < gn)):
                accepted = True
                break
            t *= 0.5
        n_iter += 1
        if not accepted:
            break
        u, f = cand, fc
        history.append(-f)
        g = obj.natural_grad(u)

    grad_norm = float(np.max(np.abs(g)))
    params = obj.to_params(u)
    converged = grad_norm < tol
    if not converged:
        raise OptimizationError(
            f"propensity fit did not converge in {n_iter} iterations (|grad|_max = {grad_norm:.3g})",
            grad_norm=grad_norm,
        )
    logger.debug("fit_mle converged: %s iterations, |grad| %.2e", n_iter, grad_norm)
    if full_output:
        return FitResult(params, -f, grad_norm, n_iter, True, history)
    return params
