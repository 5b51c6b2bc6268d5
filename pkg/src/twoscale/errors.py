"""Exception types raised by the numerical routines."""


class TwoScaleError(Exception):
    """Base class for all package errors."""


class RankDeficient(TwoScaleError):
    """Generator has rank below m0 - 1, so it is not weakly irreducible."""


class NegativeSolution(TwoScaleError):
    """Stationary solve produced a clearly negative entry."""


class SingularSystem(TwoScaleError):
    """The fundamental matrix (1 nu - Q) is numerically singular."""


class StepUnderflow(TwoScaleError):
    """Step refinement in the forward solver went below the minimum step."""


class SolvabilityViolation(TwoScaleError):
    """Forcing term of an outer-expansion equation has nonzero row sums."""


class NoDecay(TwoScaleError):
    """A boundary-layer term failed to decay by the end of its stretched-time grid."""


class RateBoundExceeded(TwoScaleError):
    """A simulated exit rate exceeded the thinning bound."""


class InsufficientResolution(TwoScaleError):
    """Too few epsilon points rose above the Monte Carlo noise floor to fit a slope."""
