"""Exception hierarchy shared by every module."""


class McqError(Exception):
    """Base class for all errors raised by mcqlab."""


class DimensionMismatch(McqError, ValueError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


class LengthMismatch(DimensionMismatch):
    pass


class InvalidDistribution(McqError, ValueError):
    pass


class RewardOutOfBounds(McqError, ValueError):
    pass


class EmptyDataset(McqError, ValueError):
    pass


class EmptyMask(McqError, ValueError):
    pass


class NonFinite(McqError, ArithmeticError):
    pass


class NonFiniteInput(NonFinite, ValueError):
    pass


class NonFiniteLoss(NonFinite):
    pass


class MissingDataset(McqError, ValueError):
    pass


class EpsilonOutOfRange(McqError, ValueError):
    pass


class UnknownKind(McqError, ValueError):
    pass


class DegenerateRefs(McqError, ValueError):
    pass


class FormatError(McqError, ValueError):
    """Base for on-disk format problems."""


class BadMagic(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class Truncated(FormatError):
    pass


class ConfigError(McqError, ValueError):
    pass
