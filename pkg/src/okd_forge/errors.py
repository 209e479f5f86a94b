"""Exception types shared across the package."""


class OKDError(Exception):
    """Base class for all package errors."""


class DimensionError(OKDError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ParameterError(OKDError, ValueError):
    """A scalar parameter is outside its valid range."""


class UsageError(OKDError, RuntimeError):
    """An API was called in a state where it cannot produce a result."""


class NonFiniteError(OKDError, FloatingPointError):
    """A computation produced NaN or Inf."""


class DataError(OKDError, ValueError):
    """Input data violates a precondition (labels, probabilities, counts)."""


class SpecError(OKDError, ValueError):
    """A declarative spec (model or dataset) is inconsistent."""


class ConfigError(OKDError, ValueError):
    """A run configuration is invalid or incomplete."""
