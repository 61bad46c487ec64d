"""Exception hierarchy shared by every raisor module."""


class RaisorError(Exception):
    """Base class for all raisor failures."""


class InvalidArgument(RaisorError, ValueError):
    """An argument violates a documented precondition."""


class DegenerateWeights(RaisorError):
    """Importance weights cannot be normalized or carry too little support."""


class InsufficientSupport(RaisorError):
    """Fewer particles with positive weight than the requested reduction size."""


class ComponentStarvation(RaisorError):
    """Too few effective points to fit the requested number of components."""


class ReplenishFailed(RaisorError):
    """Replenishment could not produce a usable proposal."""


class AnnealFailed(RaisorError):
    """Annealed rescue exhausted its step budget."""


class DuplicateLocation(RaisorError, ValueError):
    """Two observations share the same spatial location."""


class ConfigError(RaisorError, ValueError):
    """A run configuration document is malformed."""
