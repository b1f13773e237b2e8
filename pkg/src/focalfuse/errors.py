"""Exception hierarchy shared by every module."""


class FocalFuseError(Exception):
    """Base class for all package errors."""


class DimensionError(FocalFuseError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class NumericError(FocalFuseError, ArithmeticError):
    """A non-finite value appeared, or a reduction is numerically degenerate."""


class ConfigError(FocalFuseError, ValueError):
    """An invalid configuration, or one inconsistent with the parameters."""


class DataError(FocalFuseError, ValueError):
    """Invalid sample contents, e.g. out-of-range labels."""


class FormatError(FocalFuseError, ValueError):
    """A volume or checkpoint file is malformed, truncated or corrupted."""


class TapeError(FocalFuseError, RuntimeError):
    """Misuse of the autodiff tape (double backward, foreign loss, ...)."""
