"""How much weight a policy puts on clusters with nobody treated, against independent allocation.

A policy that shifts the propensity intercept keeps the within-cluster
correlation of the random intercept, so untreated clusters are far more
likely than under coin flips with the same marginal coverage.
"""

import numpy as np

from clusteripw.policy import type_b_weights
from clusteripw.simulation import DgpConfig, quadrature_truth

cfg = DgpConfig()
truth = quadrature_truth(cfg, alphas=(0.4,), m_cov=5_000)
omega = truth.omega[0.4][8]
indep = type_b_weights(0.4, 8)

print(f"policy intercept for 40% coverage: {truth.gamma0[0.4]:.4f}")
print(" s   policy   independent   ratio")
for s in range(9):
    print(f"{s:2d}  {omega[s]:.4f}      {indep[s]:.4f}     {omega[s] / indep[s]:5.2f}")
print(f"mean treated: policy {np.dot(np.arange(9), omega) / 8:.3f}, independent {0.4:.3f}")
