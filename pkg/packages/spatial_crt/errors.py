"""Exception hierarchy for spatial-crt."""

from typing import Optional, Sequence


class SpatialCRTError(Exception):
    """Base class for all spatial-crt errors."""

    exit_code = 1


class InputValidationError(SpatialCRTError, ValueError):
    """Raised when user-supplied inputs violate a documented precondition."""

    exit_code = 2


class DegenerateDraw(SpatialCRTError):
    """An estimator arm has no included units for this assignment draw.

    Attributes:
        arm: Which arm is empty (1 = treated comparison group, 0 = control).
        estimand: Estimand code (``D``, ``I``, ``T`` or ``O``) when known.
    """

    exit_code = 3

    def __init__(self, arm: int, estimand: Optional[str] = None):
        self.arm = arm
        self.estimand = estimand
        label = f" for estimand {estimand}" if estimand else ""
        super().__init__(f"arm t={arm} has no included units{label}")


class IterationLimitError(SpatialCRTError):
    """k-medoids hit its swap cap before reaching a swap-stable clustering."""

    exit_code = 3


class ConvergenceError(SpatialCRTError):
    """An iterative outcome solver failed to converge."""

    exit_code = 3


class VariogramError(SpatialCRTError):
    """Too few positive ring estimates to fit a decay exponent."""

    exit_code = 3

    def __init__(self, message: str, thetas: Sequence[float]):
        self.thetas = list(thetas)
        super().__init__(f"{message}; ring estimates: {self.thetas}")
