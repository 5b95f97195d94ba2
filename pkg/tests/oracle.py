"""From-scratch reference implementation for small instances.

Integrals over the random intercept use adaptive quadrature
(``scipy.integrate.quad``) and every stratum sum enumerates the vectors
explicitly, so nothing here shares code with the package kernels.
"""

import itertools
import math

import numpy as np
from scipy import integrate, optimize
from scipy.special import expit

QUAD_KW = dict(epsabs=1e-14, epsrel=1e-12, limit=200)


def _normal_expectation(f, sigma):
    if sigma == 0:
        return f(0.0)
    dens = lambda b: math.exp(-0.5 * (b / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi))  # noqa: E731
    lim = 12 * sigma
    val, _ = integrate.quad(lambda b: f(b) * dens(b), -lim, lim, **QUAD_KW)
    return val


def vector_prob(beta0, beta1, sigma, X, a):
    eta = beta0 + np.asarray(X, float) @ np.asarray(beta1, float)
    a = np.asarray(a)

    def f(b):
        p = expit(eta + b)
        return float(np.prod(np.where(a == 1, p, 1 - p)))

    return _normal_expectation(f, sigma)


def marginal(beta0, beta1, sigma, clusters):
    vals = []
    for c in clusters:
        eta = c.covariates @ np.asarray(beta1, float)
        vals.append(np.mean([_normal_expectation(lambda b, e=e: float(expit(beta0 + e + b)), sigma) for e in eta]))
    return float(np.mean(vals))


def gamma0(beta1, sigma, alpha, clusters):
    return optimize.brentq(lambda g: marginal(g, beta1, sigma, clusters) - alpha, -30, 30, xtol=1e-14)


def omega(beta1, sigma, g0, clusters, n):
    """Stratum probabilities for size n, averaged over the size-n clusters, by full enumeration."""
    group = [c for c in clusters if c.n == n]
    out = np.zeros(n + 1)
    for a in itertools.product((0, 1), repeat=n):
        out[sum(a)] += np.mean([vector_prob(g0, beta1, sigma, c.covariates, a) for c in group])
    return out


def arm_mean(c, arm):
    if arm is None:
        return float(np.mean(c.outcome))
    mask = c.treatment == arm
    return float(np.mean(c.outcome[mask])) if mask.any() else 0.0


def estimate(kind, alpha, alpha_prime, clusters, params):
    """IPW estimate of one estimand by brute force."""
    beta1, sigma = params.beta1, params.sigma
    arm = {"mu": None, "mu0": 0, "mu1": 1, "oe": None, "se0": 0, "se1": 1}[kind]
    sizes = sorted({c.n for c in clusters})

    def weights(a_):
        g = gamma0(beta1, sigma, a_, clusters)
        return {n: omega(beta1, sigma, g, clusters, n) for n in sizes}

    w = weights(alpha)
    wp = weights(alpha_prime) if alpha_prime is not None else None
    total = 0.0
    for c in clusters:
        s, n = c.n_treated, c.n
        pr = vector_prob(params.beta0, beta1, sigma, c.covariates, c.treatment)
        wt = w[n][s] / math.comb(n, s)
        if wp is not None:
            wt -= wp[n][s] / math.comb(n, s)
        total += arm_mean(c, arm) * wt / pr
    return total / len(clusters)
