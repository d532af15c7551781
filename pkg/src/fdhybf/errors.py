"""Exception hierarchy shared by every module of the package."""


class HybfError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(HybfError, ValueError):
    pass


class DimensionMismatch(HybfError, ValueError):
    pass


class SingularCovariance(HybfError, ValueError):
    pass


class SingularProjection(HybfError, ValueError):
    pass


class GeometryError(HybfError, ValueError):
    pass


class BracketFailure(HybfError, RuntimeError):
    pass


class PencilTooLarge(HybfError, ValueError):
    pass


class MissingFeedback(HybfError, RuntimeError):
    pass


class ConfigError(HybfError, ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
