"""Exception types shared across the package."""


class DynphaseError(Exception):
    """Base class for all package errors."""


class ConfigError(DynphaseError):
    """Invalid configuration value or unknown configuration key."""


class DimensionError(DynphaseError):
    """Array shape incompatible with the operation or the model."""


class SchemaError(DynphaseError):
    """A file on disk does not conform to the documented schema."""


class TrainingError(DynphaseError):
    """Optimization failed (non-finite loss, divergence)."""
