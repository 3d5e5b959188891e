"""Exception types raised across the package."""


class SphereBinError(Exception):
    """Base class for all domain errors."""


class DegenerateVector(SphereBinError):
    pass


class DimensionMismatch(SphereBinError):
    pass


class DomainError(SphereBinError):
    pass


class SingularDerivative(SphereBinError):
    pass


class LabelOutOfRange(SphereBinError):
    pass


class InvalidHyperparams(SphereBinError):
    pass


class InvalidPlan(SphereBinError):
    pass


class InsufficientData(SphereBinError):
    pass


class ConfigError(SphereBinError):
    pass
