"""Anchored stochastic inversion of spatial fields with kNN likelihoods."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    AnchorInvError,
    ConditioningError,
    ConfigError,
    DegenerateDensityError,
    DomainError,
    InferenceFailure,
    NumericalError,
    SolverError,
)
from .geostat import Grid, StructuralParams  # noqa: E402

__all__ = [
    "AnchorInvError", "ConditioningError", "ConfigError", "DegenerateDensityError", "DomainError",
    "InferenceFailure", "NumericalError", "SolverError", "Grid", "StructuralParams", "__version__",
]
