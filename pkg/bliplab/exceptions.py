class BlipLabError(Exception):
    """Base class for errors raised by bliplab."""


class ConfigError(BlipLabError, ValueError):
    """Missing, unknown or ill-typed configuration values."""


class DataError(BlipLabError, ValueError):
    """Malformed dataset records, checkpoints or schema mismatches."""


class NumericalError(BlipLabError, FloatingPointError):
    """A computation produced non-finite values."""
