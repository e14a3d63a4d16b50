"""Python access to the cloudflow library: sampling, inference and residual checks."""

from ._cloudflow import (
    ConfigError,
    DataError,
    Error,
    NumericalError,
    Predictor,
    conservation_residuals,
    parameter_count,
    run,
    sample_cylinder,
)

__all__ = [
    "ConfigError",
    "DataError",
    "Error",
    "NumericalError",
    "Predictor",
    "conservation_residuals",
    "parameter_count",
    "run",
    "sample_cylinder",
]
