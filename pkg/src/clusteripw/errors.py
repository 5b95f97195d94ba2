"""Exception hierarchy shared by every stage of the pipeline."""


class ClusterIPWError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigurationError(ClusterIPWError, ValueError):
    """Inconsistent inputs: dimension mismatch, bad layout, invalid option."""

    exit_code = 7


class SchemaError(ConfigurationError):
    """Input file is missing required columns or has malformed rows."""

    exit_code = 3


class DomainError(ConfigurationError):
    """A policy value or probability lies outside its admissible range."""


class SeparationError(ClusterIPWError):
    """Treatment is constant across the whole sample; the model is not identified."""

    exit_code = 4


class OptimizationError(ClusterIPWError):
    """Maximum-likelihood fit did not converge."""

    exit_code = 4

    def __init__(self, message, grad_norm=None):
        super().__init__(message)
        self.grad_norm = grad_norm


class SolverError(ClusterIPWError):
    """Root finding failed (bracket could not be established)."""

    exit_code = 4


class CoverageError(ClusterIPWError):
    """A counterfactual weight needed by the estimator was not estimated."""

    exit_code = 5


class PositivityError(ClusterIPWError):
    """A cluster propensity score evaluated to zero."""

    exit_code = 6


class NumericalError(ClusterIPWError, ArithmeticError):
    """Underflow, non-finite derivative, or a (near-)singular linear system."""

    exit_code = 6

    def __init__(self, message, index=None, condition=None):
        super().__init__(message)
        self.index = index
        self.condition = condition


class ReplicationError(ClusterIPWError):
    """Too many replicates of a simulation study failed."""

    exit_code = 8
