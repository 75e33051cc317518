"""Exception types shared across the package."""


class GraphValidationError(ValueError):
    """Adjacency input violates symmetry, sign or zero-diagonal rules."""


class DimensionError(ValueError):
    """Operand shapes are inconsistent."""


class ConvergenceError(RuntimeError):
    """An iterative solver stopped before meeting its tolerance.

    ``achieved`` carries the residual (or KKT violation) at exit.
    """

    def __init__(self, message, achieved=float("nan"), iterations=0):
        super().__init__(message)
        self.achieved = achieved
        self.iterations = iterations


class UnsupportedModeError(RuntimeError):
    """Requested computation needs state that was not retained."""
