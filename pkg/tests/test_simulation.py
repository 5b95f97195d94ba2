import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.stats import binom

from clusteripw import EstimandSpec, PolicySolution, estimate_omega_exhaustive, solve_gamma0, standard_estimands
from clusteripw.data import ClusterBatch
from clusteripw.errors import ConfigurationError, ReplicationError
from clusteripw.simulation import (
    DgpConfig,
    assemble_truth,
    draw_covariates,
    draw_sizes,
    fast_config,
    generate_dataset,
    quadrature_truth,
    replicate_study,
    stream,
    summarize_replicates,
    truth_gamma0,
    truth_omega,
    truth_potential_outcomes,
)

FLAT = dict(beta0=0.0, beta1=(0.0, 0.0), sigma=0.0)
NULL_OUTCOME = dict(outcome_intercept=0.0, outcome_l1=0.0, outcome_l2=0.0, outcome_treat=0.0,
                    outcome_spill=0.0, outcome_interact=0.0)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        DgpConfig(size_probs=(0.5, 0.5, 0.5))
    with pytest.raises(ConfigurationError):
        DgpConfig(sigma=-1)
    with pytest.raises(ConfigurationError):
        DgpConfig(normal_scale="precision")
    assert DgpConfig(normal_scale="variance").sd(4.0) == 2.0


def test_size_distribution():
    sizes = draw_sizes(DgpConfig(), stream(0, 1), 100_000)
    assert abs(np.mean(sizes == 8) - 0.4) < 0.01
    assert abs(np.mean(sizes == 22) - 0.35) < 0.01


def test_covariate_means():
    cfg = DgpConfig()
    sizes = draw_sizes(cfg, stream(1, 2), 5_000)
    l1, l2 = draw_covariates(cfg, stream(1, 3), sizes)
    assert l1.size > 100_000
    assert abs(l1.mean() - 40) < 0.1
    assert abs(l1.std() - 5) < 0.05
    assert abs(l2.mean() - 6) < 0.1


def test_flat_treatment_fraction():
    clusters = generate_dataset(DgpConfig(M=5_000, **FLAT, seed=2))
    A = np.concatenate([c.treatment for c in clusters])
    assert abs(A.mean() - 0.5) < 0.01


def test_dataset_determinism():
    a = generate_dataset(DgpConfig(M=50, seed=4), replicate=3)
    b = generate_dataset(DgpConfig(M=50, seed=4), replicate=3)
    c = generate_dataset(DgpConfig(M=50, seed=4), replicate=4)
    for x, y in zip(a, b):
        assert np.array_equal(x.covariates, y.covariates)
        assert np.array_equal(x.treatment, y.treatment) and np.array_equal(x.outcome, y.outcome)
    assert not all(np.array_equal(x.outcome, y.outcome) for x, y in zip(a, c))


def test_truth_gamma0_examples():
    cfg = DgpConfig(**FLAT)
    assert abs(truth_gamma0(cfg, 0.5, m1=100_000)) <= 0.005
    base = DgpConfig()
    g40, g55 = truth_gamma0(base, 0.40, m1=100_000), truth_gamma0(base, 0.55, m1=100_000)
    assert g55 > g40
    with pytest.raises(ConfigurationError):
        truth_gamma0(base, 0.5, m1=10_000, grid=(3.0, 4.0))


def test_truth_gamma0_matches_solver():
    cfg = DgpConfig()
    m = 50_000
    rng = stream(77, 0)
    sizes = draw_sizes(cfg, rng, m)
    l1, l2 = draw_covariates(cfg, rng, sizes)
    starts = np.r_[0, np.cumsum(sizes)[:-1]].astype(np.int64)
    z = np.zeros(l1.size)
    batch = ClusterBatch(np.column_stack([l1, l2]), z.astype(np.int8), z, sizes, starts)
    for alpha in (0.4, 0.55):
        solved = solve_gamma0(cfg.true_params, alpha, batch).gamma0
        assert abs(truth_gamma0(cfg, alpha, m1=200_000) - solved) < 0.02


def test_truth_omega_binomial_and_pmf():
    cfg = DgpConfig(**FLAT)
    m2 = 200_000
    w = truth_omega(cfg, 0.3, math.log(0.3 / 0.7), 6, m2=m2)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    pmf = binom.pmf(np.arange(7), 6, 0.3)
    assert np.all(np.abs(w - pmf) < 3 * np.sqrt(pmf * (1 - pmf) / m2) + 1e-12)


def test_truth_omega_matches_exhaustive_estimator():
    # simulation vs quadrature + convolution at the true parameters
    cfg = DgpConfig()
    n, m2, gamma0 = 8, 400_000, 0.3
    w_sim = truth_omega(cfg, 0.4, gamma0, n, m2=m2, seed=5)
    sizes = np.full(20_000, n)
    l1, l2 = draw_covariates(cfg, stream(6, 0), sizes)
    starts = (np.arange(sizes.size) * n).astype(np.int64)
    z = np.zeros(l1.size)
    batch = ClusterBatch(np.column_stack([l1, l2]), z.astype(np.int8), z, sizes, starts)
    w_quad = estimate_omega_exhaustive(cfg.true_params, PolicySolution(0.4, gamma0), batch,
                                       all_strata=True).per_size[n]
    se = np.sqrt(w_quad * (1 - w_quad) / m2) + 1e-4 / math.sqrt(20)
    assert np.all(np.abs(w_sim - w_quad) < 3 * se)


def test_potential_outcome_examples():
    cfg = DgpConfig(**NULL_OUTCOME)
    ybar, y0, y1 = truth_potential_outcomes(cfg, 5, m3=50_000)
    assert y1[0] == 0.0 and y0[5] == 0.0
    se = math.sqrt(0.25 / (50_000 * 5))
    assert np.all(np.abs(ybar - 0.5) < 3 * se * math.sqrt(5))
    e_bar, e0, e1 = truth_potential_outcomes(DgpConfig(**NULL_OUTCOME), 5, m3=1000, expected=True)
    assert_allclose(e_bar, 0.5, rtol=1e-14)


def test_truth_assembly_is_weighted_sum():
    cfg = fast_config()
    table = assemble_truth(cfg, (0.4, 0.5), m1=50_000, m2=20_000, m3=20_000)
    spec = EstimandSpec("mu0", 0.4)
    manual = sum(p * np.dot(table.outcomes[n][1], table.omega[0.4][n]) for n, p in zip(cfg.sizes, cfg.size_probs))
    assert_allclose(table.value(spec), manual, rtol=1e-14)
    assert table.value(EstimandSpec("oe", 0.4, 0.4)) == 0.0
    for a in (0.4, 0.5):
        for n, vec in table.omega[a].items():
            assert np.all(vec >= 0) and vec.sum() == pytest.approx(1.0, abs=1e-12)
    again = assemble_truth(cfg, (0.4, 0.5), m1=50_000, m2=20_000, m3=20_000)
    assert table.to_frame(standard_estimands((0.4, 0.5))).equals(again.to_frame(standard_estimands((0.4, 0.5))))


def test_simulation_and_quadrature_truth_agree():
    cfg = fast_config()
    alphas = (0.4, 0.55)
    sim = assemble_truth(cfg, alphas, m1=300_000, m2=300_000, m3=300_000)
    quad = quadrature_truth(cfg, alphas, m_cov=20_000)
    for s in standard_estimands(alphas):
        tol = 0.004 if s.is_contrast else 0.006
        assert abs(sim.value(s) - quad.value(s)) < tol, s


def test_summary_columns():
    import pandas as pd
    rows = pd.DataFrame({"replicate": [0, 1, 2], "estimand": ["mu(0.4)"] * 3, "point": [0.5, 0.6, 0.7],
                         "std_error": [0.1, 0.1, 0.1], "ci_lower": [0.3, 0.4, 0.65], "ci_upper": [0.7, 0.8, 0.9]})
    out = summarize_replicates(rows, {"mu(0.4)": 0.6}, [EstimandSpec("mu", 0.4)]).iloc[0]
    assert out["bias"] == pytest.approx(0.0, abs=1e-15)
    assert out["coverage"] == pytest.approx(200 / 3)
    assert out["ese"] == pytest.approx(0.1)
    assert out["ser"] == pytest.approx(1.0)


def test_replicate_study_small():
    cfg = fast_config(M=60, seed=3)
    specs = [EstimandSpec("mu", 0.4), EstimandSpec("oe", 0.5, 0.4)]
    truth = {s.label: 0.0 for s in specs}
    rep = replicate_study(cfg, 4, truth, specs)
    assert len(rep.replicates) == 8 and rep.n_failed == 0
    again = replicate_study(cfg, 4, truth, specs)
    assert rep.replicates.equals(again.replicates)
    with pytest.raises(ReplicationError):
        # every individual treated: the propensity model is not identified
        replicate_study(cfg.with_(beta0=60.0), 3, truth, specs)
