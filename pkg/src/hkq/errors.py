"""Exception hierarchy shared by all hkq modules."""


class HKQError(Exception):
    """Base class for every error raised by hkq."""


class RangeError(HKQError, ValueError):
    """A time or rescaled time lies outside the span covered by a solution."""


class FrameError(HKQError, ValueError):
    """An object was passed in the wrong frame (physical vs rescaled)."""


class SolverError(HKQError, RuntimeError):
    """An ODE/PDE solve failed (step underflow, lost positivity, CFL...)."""


class GridError(HKQError, ValueError):
    """Grids are inconsistent, too coarse, or too narrow for the request."""


class AccuracyWarning(UserWarning):
    """A result was computed but its accuracy target is not guaranteed."""
