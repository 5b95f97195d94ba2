"""A short replication study with small clusters against integrated truth.

Uses 40 replicates so it finishes in well under a minute; the acceptance
suite runs the same study with 200.
"""

from clusteripw.estimands import standard_estimands
from clusteripw.simulation import fast_config, quadrature_truth, replicate_study

cfg = fast_config(M=125, seed=5)
specs = standard_estimands()
truth = quadrature_truth(cfg, m_cov=10_000)
report = replicate_study(cfg, 40, {s.label: truth.value(s) for s in specs}, specs, k=1)
print(report.summary.round(4).to_string(index=False))
print(f"failed replicates: {report.n_failed}")
