"""Exception types raised across the package."""


class DarkStreamError(Exception):
    """Base class for every error raised by darkstream."""


class FormatError(DarkStreamError):
    """Input file or weight bundle could not be interpreted."""


class UnsupportedFormat(FormatError):
    pass


class MalformedFile(FormatError):
    pass


class BadMagic(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class DuplicateName(FormatError):
    pass


class ConfigWeightMismatch(FormatError):
    """Weight bundle is missing a tensor or holds one of the wrong shape."""


class ShapeMismatch(DarkStreamError, ValueError):
    pass


class LengthMismatch(ShapeMismatch):
    pass


class InvalidChunkSize(DarkStreamError, ValueError):
    pass


class InvalidConfig(DarkStreamError, ValueError):
    pass


class StateMismatch(DarkStreamError):
    pass


class DoubleFlush(DarkStreamError):
    pass


class InsufficientData(DarkStreamError, ValueError):
    pass


class ExhaustedTries(DarkStreamError):
    pass


class EmptyBatch(DarkStreamError, ValueError):
    pass


class BudgetExceeded(DarkStreamError):
    pass


class ZeroVector(DarkStreamError, ValueError):
    pass


class EmptySide(DarkStreamError, ValueError):
    pass


class ZeroDuration(DarkStreamError, ValueError):
    pass
