"""Acceptance criteria, each reported as one PASS/FAIL line at its pinned tolerance.

The line for every criterion is printed in the terminal summary (see
``conftest.py``) and the test itself fails if any check misses.
Heavy pieces (simulation truth at 10^6 draws, 200-replicate studies and
the 5,000-cluster smoke) take about 10 minutes on one core.
"""

import math
import time

import numpy as np
import pandas as pd
import pytest

from clusteripw import EstimandSpec, PropensityParams
from clusteripw.cli import main
from clusteripw.estimands import standard_estimands
from clusteripw.estimators import estimate_many
from clusteripw.io import read_json, write_clusters_csv
from clusteripw.mestimation import build_stack, sandwich_generic
from clusteripw.policy import (
    estimate_omega_exhaustive, estimate_omega_subsampled, marginal_alpha, solve_gamma0, type_b_weights,
)
from clusteripw.propensity import fit_mle, gauss_hermite
from clusteripw.simulation import DgpConfig, fast_config, generate_dataset, quadrature_truth, replicate_study

import oracle
from conftest import ACCEPTANCE, random_clusters

pytestmark = pytest.mark.acceptance


class Criterion:
    """Collects named checks and reports a single verdict line."""

    def __init__(self, number, title):
        self.number, self.title = str(number), title
        self.checks = []

    def check(self, name, value, ok):
        self.checks.append((name, value, bool(ok)))
        return ok

    def finish(self, extra=""):
        failed = [c for c in self.checks if not c[2]]
        verdict = "PASS" if not failed else "FAIL"
        shown = failed if failed else self.checks
        detail = "; ".join(f"{n}={v}" for n, v, _ in shown[:6])
        if len(shown) > 6:
            detail += f"; ... ({len(shown)} items)"
        line = f"criterion {self.number} [{verdict}] {self.title}: {detail}{extra}"
        ACCEPTANCE[self.number] = line
        print(line)
        assert not failed, line


@pytest.fixture(scope="module")
def mc_truth(tmp_path_factory):
    """`truth` command at m1 = m2 = m3 = 10^6 on the full-scale design."""
    out = tmp_path_factory.mktemp("truth") / "truth.csv"
    assert main(["truth", "--m1", "1000000", "--m2", "1000000", "--m3", "1000000", "--out", str(out)]) == 0
    table = pd.read_csv(out).set_index("estimand")["truth"]
    omega = pd.read_csv(out.with_name("truth_omega.csv"))
    return out, table, omega


def test_criterion_1_truth_reproduction(mc_truth):
    _, table, _ = mc_truth
    c = Criterion(1, "truth reproduction at m=1e6")
    levels = {"mu(0.4)": 0.662, "mu(0.5)": 0.651, "mu(0.55)": 0.645, "mu0(0.4)": 0.712, "mu1(0.4)": 0.573}
    contrasts = {"oe(0.5,0.4)": -0.011, "se0(0.55,0.5)": -0.002}
    for label, ref in levels.items():
        c.check(label, f"{table[label]:.4f}", abs(table[label] - ref) <= 0.010)
    for label, ref in contrasts.items():
        c.check(label, f"{table[label]:.4f}", abs(table[label] - ref) <= 0.004)
    c.finish()


def test_criterion_2_omega_comparison(mc_truth):
    _, _, omega = mc_truth
    row = omega[(omega["alpha"] == 0.4) & (omega["n"] == 8) & (omega["s"] == 0)].iloc[0]
    c = Criterion(2, "omega vs independent allocation at (0, 8, 0.4)")
    c.check("omega", f"{row['omega']:.4f}", abs(row["omega"] - 0.059) <= 0.005)
    c.check("omega_tv", f"{row['omega_tv']:.6f}", round(row["omega_tv"], 4) == 0.0168)
    c.check("ratio", f"{row['ratio']:.3f}", 3.0 <= row["ratio"] <= 4.0)
    c.finish()


def _replication_checks(c, report, ase_band=None):
    s = report.summary.set_index("estimand")
    c.check("max|bias|", f"{np.abs(s['bias']).max():.4f}", (np.abs(s["bias"]) <= 0.010).all())
    c.check("coverage", f"[{s['coverage'].min():.1f}, {s['coverage'].max():.1f}]",
            ((s["coverage"] >= 91) & (s["coverage"] <= 98)).all())
    c.check("SER", f"[{s['ser'].min():.3f}, {s['ser'].max():.3f}]", ((s["ser"] >= 0.85) & (s["ser"] <= 1.30)).all())
    ase = s.loc["mu(0.4)", "ase"]
    if ase_band is not None:
        c.check("ASE mu(0.4)", f"{ase:.4f}", ase_band[0] <= ase <= ase_band[1])
    c.check("failed", report.n_failed, report.n_failed <= 0.05 * report.R)
    for label in s.index:
        row = s.loc[label]
        c.check(label, f"bias {row['bias']:+.4f} cov {row['coverage']:.1f} ser {row['ser']:.2f}",
                abs(row["bias"]) <= 0.010 and 91 <= row["coverage"] <= 98 and 0.85 <= row["ser"] <= 1.30)


def test_criterion_3_replication_full_scale(mc_truth):
    _, table, _ = mc_truth
    specs = standard_estimands()
    t0 = time.perf_counter()
    report = replicate_study(DgpConfig(M=125, seed=2024), 200, table.to_dict(), specs, k=1)
    elapsed = time.perf_counter() - t0
    print(report.summary.to_string(index=False))
    c = Criterion("3a", "replication R=200, M=125, k=1, full scale")
    _replication_checks(c, report, ase_band=(0.016, 0.022))
    c.finish(f" ({elapsed:.0f}s)")


def test_criterion_3_replication_fast_mode():
    cfg = fast_config(M=125, seed=2025)
    specs = standard_estimands()
    t0 = time.perf_counter()
    truth = quadrature_truth(cfg, m_cov=50_000)
    report = replicate_study(cfg, 200, {s.label: truth.value(s) for s in specs}, specs, k=1)
    elapsed = time.perf_counter() - t0
    print(report.summary.to_string(index=False))
    c = Criterion("3b", "replication R=200, M=125, k=1, fast mode with quadrature truth")
    _replication_checks(c, report)
    c.check("runtime_s", f"{elapsed:.0f}", elapsed <= 600)
    c.finish()


def test_criterion_4_oracle_equivalence():
    c = Criterion(4, "brute-force oracle equivalence and degenerate sandwich")
    worst = 0.0
    for seed in range(12):
        rng = np.random.default_rng(1000 + seed)
        M = int(rng.integers(2, 7))
        clusters = random_clusters(rng, M, sizes=(1, 2, 3, 4), p=int(rng.integers(1, 3)))
        p = clusters[0].p
        params = PropensityParams(rng.normal(scale=0.5), rng.normal(scale=0.5, size=p), 0.2 + rng.random())
        specs = [EstimandSpec("mu", 0.45), EstimandSpec("mu0", 0.45), EstimandSpec("mu1", 0.6),
                 EstimandSpec("oe", 0.6, 0.45), EstimandSpec("se0", 0.6, 0.45), EstimandSpec("se1", 0.6, 0.45)]
        run = estimate_many(specs, clusters, params, rule=gauss_hermite(60), variance=False)
        for r in run.reports:
            s = r.spec
            worst = max(worst, abs(r.point - oracle.estimate(s.kind, s.alpha, s.alpha_prime, clusters, params)))
    c.check("max abs diff (12 datasets x 6 estimands)", f"{worst:.1e}", worst <= 1e-8)

    T = np.random.default_rng(7).exponential(size=83)
    sw = sandwich_generic(lambda th: (T - th[0])[:, None], np.array([T.mean()]))
    closed = T.std(ddof=0) / math.sqrt(T.size)
    rel = abs(sw.std_error(0) - closed) / closed
    c.check("degenerate SE rel diff", f"{rel:.1e}", rel <= 1e-10)
    c.finish()


def test_criterion_5_property_suite():
    c = Criterion(5, "property suite")
    cfg = fast_config(M=80, seed=31)
    clusters = generate_dataset(cfg)
    params = fit_mle(clusters)

    # omega pmf closure
    sol = solve_gamma0(params, 0.45, clusters)
    w = estimate_omega_exhaustive(params, sol, clusters, all_strata=True)
    dev = max(abs(v.sum() - 1) for v in w.per_size.values())
    neg = min(v.min() for v in w.per_size.values())
    c.check("pmf closure", f"{dev:.1e}", dev <= 1e-8 and neg >= 0)

    # binomial reduction and type-B coincidence with no covariate effect and no random intercept
    flat = PropensityParams(0.3, np.zeros(2), 0.0)
    fsol = solve_gamma0(flat, 0.45, clusters)
    fw = estimate_omega_exhaustive(flat, fsol, clusters, all_strata=True)
    binom = max(np.max(np.abs(v - type_b_weights(0.45, n))) for n, v in fw.per_size.items())
    c.check("binomial reduction", f"{binom:.1e}", binom <= 1e-12)
    run = estimate_many([EstimandSpec("mu", 0.45), EstimandSpec("mu_typeB", 0.45)], clusters, flat, variance=False)
    gap = abs(run.reports[0].point - run.reports[1].point)
    c.check("type-B coincidence", f"{gap:.1e}", gap <= 1e-8)

    # gamma0 fixed point
    a_star = marginal_alpha(params, params.beta0, clusters)
    rt = abs(solve_gamma0(params, a_star, clusters).gamma0 - params.beta0)
    c.check("gamma0 round trip", f"{rt:.1e}", rt <= 1e-8)

    # stack root, W PSD, k-equivalence
    specs = standard_estimands()
    stack = build_stack(clusters, specs)
    theta = stack.plugin(params)
    root = np.max(np.abs(stack.mean_psi(theta.values)))
    c.check("stack root", f"{root:.1e}", root <= 1e-6)
    sw = stack.sandwich(theta.values)
    eig = np.linalg.eigvalsh(sw.W_hat).min() / np.linalg.eigvalsh(sw.W_hat).max()
    c.check("W PSD (min/max eig)", f"{eig:.1e}", eig >= -1e-12)
    big = max(math.comb(n, n // 2) for n in cfg.sizes)
    sub = build_stack(clusters, specs, k=big, seed=3)
    keq = np.max(np.abs(sub.plugin(params).values - theta.values))
    c.check("k-equivalence", f"{keq:.1e}", sub.labels == stack.labels and keq <= 1e-12)

    # quadrature refinement
    q25 = estimate_many(specs, clusters, params, rule=gauss_hermite(25), variance=False)
    q50 = estimate_many(specs, clusters, params, rule=gauss_hermite(50), variance=False)
    refine = max(abs(a.point - b.point) for a, b in zip(q25.reports, q50.reports))
    c.check("Q->2Q", f"{refine:.1e}", refine < 1e-4)

    # sub-sampling unbiasedness over 500 seeds
    draws = np.array([estimate_omega_subsampled(params, sol, clusters, k=1, seed=s, all_strata=True).per_size[8]
                      for s in range(500)])
    exact = w.per_size[8]
    se = draws.std(axis=0, ddof=1) / math.sqrt(500)
    # s = 0 and s = n hold one vector each, so nothing is sampled there
    inner = slice(1, 8)
    z = np.max(np.abs(draws.mean(axis=0)[inner] - exact[inner]) / se[inner])
    c.check("sub-sample unbiasedness max z", f"{z:.2f}", z <= 3)
    ends = np.max(np.abs(draws[:, [0, 8]] - exact[[0, 8]]))
    c.check("single-vector strata exact", f"{ends:.1e}", ends <= 1e-12)
    c.finish()


def test_criterion_6_large_scale_smoke(tmp_path):
    c = Criterion(6, "5,000 clusters of sizes 1-60, 5 policies, k=3")
    sizes = tuple(range(1, 61))
    cfg = DgpConfig(M=5000, sizes=sizes, size_probs=(1 / 60,) * 60, seed=606)
    data = tmp_path / "large.csv"
    write_clusters_csv(generate_dataset(cfg), data, ["L1", "L2"])
    alphas = ["0.3", "0.4", "0.5", "0.55", "0.6"]
    args = ["estimate", "--data", str(data), "--k", "3", "--seed", "1", "--out", str(tmp_path / "est.csv")]
    for a in alphas:
        args += ["--alpha", a]
    for a in alphas[1:]:
        args += ["--contrast", f"{a},{alphas[0]}"]
    t0 = time.perf_counter()
    rc = main(args)
    elapsed = time.perf_counter() - t0
    c.check("exit code", rc, rc == 0)
    if rc == 0:
        est = pd.read_csv(tmp_path / "est.csv")
        side = read_json(tmp_path / "est.json")
        finite = np.isfinite(est[["point", "std_error", "ci_lower", "ci_upper"]].to_numpy()).all()
        c.check("estimands", len(est), len(est) == 27)
        c.check("finite CIs", finite, finite and (est["std_error"] > 0).all())
        c.check("q", side["q"], True)
        c.check("Jacobian condition", f"{side['jacobian_condition']:.1e}", side["jacobian_condition"] < 1e10)
    c.check("runtime_s", f"{elapsed:.0f}", elapsed <= 1800)
    c.finish()
