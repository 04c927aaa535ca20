"""Exception hierarchy shared by all trajstack modules."""


class TrajstackError(Exception):
    """Base class for all library errors."""


class ParameterDomainError(TrajstackError, ValueError):
    """A parameter is outside its mathematical domain (non-positive scale,
    non-finite input, all-zero denominator, ...)."""


class NumericalRankError(TrajstackError, ValueError):
    """A matrix that must be positive definite failed factorization even
    after the jitter ladder was exhausted."""


class IdentifiabilityError(TrajstackError, ValueError):
    """The normal equations of a linear system are rank deficient."""


class ConfigurationError(TrajstackError, ValueError):
    """A run/spec configuration is inconsistent with the data or itself."""


class DataValidationError(TrajstackError, ValueError):
    """Input data violates the documented schema or invariants."""
