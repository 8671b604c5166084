"""Exception types raised across the package."""


class CoarsenError(Exception):
    """Base class for every error raised by coarsenkit."""


class DomainError(CoarsenError, ValueError):
    """An argument lies outside the interval on which a quantity is defined."""


class ParameterError(CoarsenError, ValueError):
    """A constructor or option received a parameter outside its admissible range."""


class CapabilityError(CoarsenError):
    """The object cannot provide the requested quantity (e.g. a missing derivative)."""


class DegenerateStateError(CoarsenError):
    """The discrete solver state lost a structural property it relies on."""


class StepSizeError(CoarsenError):
    """A time step would reorder characteristics; the caller should shrink it."""


class HistoryGapError(CoarsenError):
    """A backward map was requested beyond the recorded kappa history."""


class QuadratureError(CoarsenError):
    """A quadrature did not reach the requested accuracy or produced a bad value."""


class ConfigError(CoarsenError, ValueError):
    """A scenario or spec dictionary is malformed."""
