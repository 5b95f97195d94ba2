"""Inverse-probability-weighted estimation of policy effects under clustered interference.

A logistic random-intercept model for treatment is fitted by maximum
likelihood; each policy ``alpha`` replaces its intercept so the marginal
treatment probability equals ``alpha``; stratum probabilities of the number
treated per cluster weight the observed outcomes; a stacked system of
estimating equations yields sandwich standard errors.
"""

__version__ = "0.1.0"

from .data import ClusterBatch, ClusterData
from .errors import (
    ClusterIPWError,
    ConfigurationError,
    CoverageError,
    DomainError,
    NumericalError,
    OptimizationError,
    PositivityError,
    ReplicationError,
    SchemaError,
    SeparationError,
    SolverError,
)
from .estimands import EstimandSpec, standard_estimands
from .estimators import (
    EstimateReport,
    cluster_avg_outcome,
    cluster_avg_outcome_by_arm,
    estimate_many,
    estimate_with_ci,
    ipw_point_estimate,
)
from .mestimation import SandwichResult, ThetaStack, build_stack
from .policy import (
    CounterfactualWeights,
    PolicySolution,
    StratumRegistry,
    counterfactual_cluster_propensity,
    estimate_omega_exhaustive,
    estimate_omega_subsampled,
    marginal_alpha,
    solve_gamma0,
    type_b_weights,
)
from .propensity import (
    PropensityParams,
    QuadratureRule,
    cluster_log_likelihood,
    cluster_propensity,
    fit_mle,
    gauss_hermite,
    linear_predictor,
    score,
)
from .simulation import DgpConfig, assemble_truth, generate_dataset, quadrature_truth, replicate_study
