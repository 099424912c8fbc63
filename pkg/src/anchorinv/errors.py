"""Exception hierarchy.

The CLI maps these onto exit codes: ``ConfigError`` -> 2,
``NumericalError`` -> 3, ``InferenceFailure`` -> 4.
"""


class AnchorInvError(Exception):
    """Base class for all package errors."""


class DomainError(AnchorInvError, ValueError):
    """An argument lies outside the domain of a mathematical function."""


class ConfigError(AnchorInvError, ValueError):
    """Invalid configuration or inconsistent inputs."""


class NumericalError(AnchorInvError, ArithmeticError):
    """A numerical procedure failed."""


class ConditioningError(NumericalError):
    """A covariance matrix could not be factorized.

    ``diagnostics`` carries whatever was learned about the failure
    (minimum eigenvalue, coincident location pairs, ...).
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class SolverError(NumericalError):
    """A forward-model solve failed; ``residual`` holds the residual norm."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DegenerateDensityError(NumericalError):
    """The k-th neighbor distance is zero, so the kNN density is unbounded.

    Usually the forward outputs are (nearly) deterministic given the
    candidate. Add observation noise or reduce ``k``.
    """


class InferenceFailure(AnchorInvError):
    """No candidate received a usable likelihood."""


class CoincidentLocationWarning(UserWarning):
    """Two or more locations in a covariance computation coincide."""
