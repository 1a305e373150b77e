"""Exception hierarchy shared by every module."""


class GeoShiftError(Exception):
    """Base class for all package errors."""


class ParameterError(GeoShiftError, ValueError):
    pass


class ShapeError(GeoShiftError, ValueError):
    pass


class ConfigError(GeoShiftError, ValueError):
    pass


class EmptyInputError(GeoShiftError, ValueError):
    pass


class SamplerError(GeoShiftError, ValueError):
    pass


class UsageError(GeoShiftError, RuntimeError):
    pass


class FormatError(GeoShiftError, ValueError):
    """Malformed on-disk container."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class NumericError(GeoShiftError, ArithmeticError):
    """Non-finite values appeared during training."""
