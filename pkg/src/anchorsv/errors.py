"""Exception types shared across the package."""


class AnchorSVError(Exception):
    """Base class for all package errors."""


class ZeroVector(AnchorSVError, ValueError):
    """A vector whose norm is too small for an angular quantity."""


class NonFinite(AnchorSVError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ZeroPower(AnchorSVError, ValueError):
    """Signal or noise has zero power, so an SNR is undefined."""


class Infeasible(AnchorSVError, ValueError):
    """A sampling request asks for more distinct items than exist."""


class ShapeMismatch(AnchorSVError, ValueError):
    pass


class AnchorNotFrozen(AnchorSVError, RuntimeError):
    pass


class FrozenBranchError(AnchorSVError, RuntimeError):
    """Attempt to update parameters of a frozen branch."""


class UnknownId(AnchorSVError, KeyError):
    pass


class Degenerate(AnchorSVError, ValueError):
    """Input data is too degenerate for the requested statistic."""
