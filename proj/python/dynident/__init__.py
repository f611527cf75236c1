"""Parameter identification for dynamical systems."""

from ._core import (
    ConfigError,
    DegenerateLabels,
    InvalidArgument,
    IoError,
    TrainingDiverged,
    aipw_ate,
    benchmark,
    catalog_version,
    encode,
    estimate_derivatives,
    fit,
    format_mean_std,
    integrate,
    isotonic_fit,
    latent_r2,
    main,
    parameters,
    systems,
    vector_field,
)

__all__ = [
    "ConfigError",
    "DegenerateLabels",
    "InvalidArgument",
    "IoError",
    "TrainingDiverged",
    "aipw_ate",
    "benchmark",
    "catalog_version",
    "encode",
    "estimate_derivatives",
    "fit",
    "format_mean_std",
    "integrate",
    "isotonic_fit",
    "latent_r2",
    "main",
    "parameters",
    "systems",
    "vector_field",
]
