"""Exception hierarchy shared by every module."""


class LmdVitError(Exception):
    """Base class for all package errors."""


class DimensionError(LmdVitError, ValueError):
    """Tensor extents are incompatible with the requested operation."""


class UsageError(LmdVitError, ValueError):
    """An API or CLI contract was violated by the caller."""


class ConfigError(LmdVitError, ValueError):
    """A model or run configuration is inconsistent."""


class FormatError(LmdVitError, ValueError):
    """A file on disk does not match the expected binary or text layout."""


class NumericError(LmdVitError, ArithmeticError):
    """A non-finite value appeared where finite values were required."""
