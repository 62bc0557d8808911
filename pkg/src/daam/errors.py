"""Exception hierarchy shared across the package."""


class DaamError(Exception):
    """Base class for all package errors."""


class ShapeError(DaamError):
    """Tensor extents incompatible with the requested operation."""


class NumericError(DaamError):
    """A non-finite value appeared where finite math was required."""


class ConfigError(DaamError):
    """Invalid or infeasible configuration."""


class FormatError(DaamError):
    """Malformed, truncated, or wrong-magic binary file."""


class DataError(DaamError):
    """Dataset contents inconsistent with their manifest."""
