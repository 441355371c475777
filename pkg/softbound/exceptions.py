"""Exception hierarchy shared by all services."""


class SoftboundError(Exception):
    """Base class for every error raised by softbound."""


class DomainError(SoftboundError, ValueError):
    """Input outside the mathematical domain of an operation."""


class UsageError(SoftboundError, ValueError):
    """Operation called with an inapplicable kind, size or flag."""


class LpConstructionError(SoftboundError):
    """Linear program could not be assembled from the given bounds."""


class NetworkFormatError(SoftboundError):
    """Network description is malformed or has inconsistent dimensions."""


class SoftboundOverflowWarning(RuntimeWarning):
    """An exponential saturated to +inf; affected bounds fall back to [0, 1]."""
