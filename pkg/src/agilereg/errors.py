"""Exception types shared across the package."""


class AgileRegError(Exception):
    """Base class for all package errors."""


class ImageFormatError(AgileRegError, ValueError):
    """Malformed or unsupported image file."""


class WeightFormatError(AgileRegError, ValueError):
    """Malformed weight file (bad magic, version, CRC or truncation)."""


class ShapeError(AgileRegError, ValueError):
    pass


class ConfigError(AgileRegError, ValueError):
    pass


class UnderdeterminedError(AgileRegError, ValueError):
    pass


class DegenerateError(AgileRegError, ValueError):
    pass


class EmptyMatchError(AgileRegError):
    pass


class NoConsensusError(AgileRegError):
    pass


class PointAtInfinityError(AgileRegError, ArithmeticError):
    pass
