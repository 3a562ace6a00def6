"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Tensor shapes or channel counts do not match what an operation needs."""


class DataError(ValueError):
    """On-disk data or labels are malformed."""


class ConfigError(ValueError):
    """Unknown or invalid configuration keys / values."""


class NumericError(RuntimeError):
    """NaN or other non-finite values where a finite result is required."""
