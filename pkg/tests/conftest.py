import numpy as np
import pytest

from clusteripw import ClusterData, PropensityParams


def random_clusters(rng, M, sizes=(1, 2, 3, 4), p=1, treat_p=0.5):
    """Small clusters with Normal covariates and Bernoulli treatments/outcomes."""
    out = []
    for i in range(M):
        n = int(rng.choice(sizes))
        X = rng.normal(size=(n, p))
        A = (rng.random(n) < treat_p).astype(int)
        Y = rng.normal(size=n)
        out.append(ClusterData(i, X, A, Y))
    return out


def ensure_both_arms(clusters):
    A = np.concatenate([c.treatment for c in clusters])
    return 0 < A.sum() < A.size


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def table_params():
    return PropensityParams(0.75, [-0.015, -0.025], 0.75)


# acceptance criteria register their outcome here; printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
