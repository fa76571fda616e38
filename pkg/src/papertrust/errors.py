"""Exception hierarchy shared by every papertrust module."""


class PaperTrustError(Exception):
    """Base class for all package errors."""


class InvalidParams(PaperTrustError, ValueError):
    pass


class DegenerateGeometry(PaperTrustError, ValueError):
    pass


class AlignmentFailed(PaperTrustError):
    """Registration markers could not be used (tampered or missing)."""


class EmptyCapture(PaperTrustError, ValueError):
    pass


class WrongImageCount(PaperTrustError, ValueError):
    pass


class SingularSystem(PaperTrustError, ArithmeticError):
    pass


class InvalidConfig(PaperTrustError, ValueError):
    pass


class LengthMismatch(PaperTrustError, ValueError):
    pass


class IndexOutOfRange(PaperTrustError, IndexError):
    pass


class InsufficientPopulation(PaperTrustError, ValueError):
    pass


class ZeroVariance(PaperTrustError, ArithmeticError):
    pass


class EmptyScores(PaperTrustError, ValueError):
    pass


class DuplicateId(PaperTrustError, KeyError):
    pass


class DimensionMismatch(PaperTrustError, ValueError):
    pass


class UnknownId(PaperTrustError, KeyError):
    pass


class WrongMode(PaperTrustError):
    pass


class LockedOut(PaperTrustError):
    pass


class NothingToLeak(PaperTrustError):
    """Raised when a store holds no raw payloads (hashed mode)."""


class NoQuorum(PaperTrustError):
    pass


class UnknownProduct(PaperTrustError, KeyError):
    pass


class StaleNonce(PaperTrustError):
    pass


class ConfigError(PaperTrustError, ValueError):
    pass
