"""Exception hierarchy.

Every domain error derives from :class:`ChainSDEError` so the CLI can map
them to exit status 1. Precondition failures additionally subclass
``ValueError``.
"""


class ChainSDEError(Exception):
    """Base class for all toolkit errors."""


class PreconditionError(ChainSDEError, ValueError):
    """An argument violates a documented precondition."""


class ConfigError(ChainSDEError):
    """Configuration file is missing keys, has unknown keys or bad types."""


class UnknownModel(PreconditionError):
    pass


class NonFiniteDrift(ChainSDEError):
    pass


class UnsupportedDrift(PreconditionError):
    pass


class MissingDerivative(PreconditionError):
    pass


class DimensionError(PreconditionError):
    pass


class GridMismatch(PreconditionError):
    pass


class PairingError(PreconditionError):
    pass


class UnstableStep(ChainSDEError):
    pass


class DegenerateLaw(ChainSDEError):
    pass


class TooFewSamples(PreconditionError):
    pass


class BandwidthError(PreconditionError):
    pass


class SigmaError(PreconditionError):
    pass


class WeightCollapse(ChainSDEError):
    pass


class CFLViolation(PreconditionError):
    pass


class BoundaryLeak(ChainSDEError):
    pass


class NonIdentifiable(ChainSDEError):
    pass


class DegenerateSample(ChainSDEError):
    pass


class SingularConditioning(ChainSDEError):
    pass
