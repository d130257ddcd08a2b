"""Exception types raised across the package."""


class BetaKDError(ValueError):
    """Base class for all package errors."""


class ZeroVectorError(BetaKDError):
    pass


class LengthMismatchError(BetaKDError):
    pass


class TokenOutOfRangeError(BetaKDError):
    pass


class DimensionMismatchError(BetaKDError):
    pass


class ShapeMismatchError(BetaKDError):
    pass


class NonPositiveDeterminantError(BetaKDError):
    pass


class NonPositiveLossError(BetaKDError):
    pass


class NonPositiveBetaError(BetaKDError):
    pass


class WrongModeError(BetaKDError):
    pass


class QuadratureNotConvergedError(BetaKDError):
    pass


class DivergedError(BetaKDError):
    pass


class NonFiniteLossError(BetaKDError):
    """Raised when a training step produces a NaN/Inf loss.

    ``dump`` carries the offending batch and a checksum of the parameters.
    """

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


class ConfigError(BetaKDError):
    pass
