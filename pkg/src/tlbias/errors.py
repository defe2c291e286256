"""Exception hierarchy shared by every module."""


class TLBiasError(Exception):
    """Base class for all package errors."""


class DimensionError(TLBiasError, ValueError):
    """Operand shapes or extents are incompatible."""


class DomainError(TLBiasError, ValueError):
    """A value lies outside the domain where the operation is defined."""


class UsageError(TLBiasError, ValueError):
    """An API was called with arguments that violate its contract."""


class StateError(TLBiasError, RuntimeError):
    """Required state (e.g. batch-norm running statistics) is missing."""


class ConfigError(TLBiasError, ValueError):
    """A configuration object violates one of its invariants."""


class FormatError(TLBiasError, ValueError):
    """An on-disk artifact is truncated, corrupt, or of the wrong version."""
