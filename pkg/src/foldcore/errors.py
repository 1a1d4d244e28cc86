"""Exception types shared across the package."""


class FoldcoreError(Exception):
    """Base class for all foldcore errors."""


class SingularMatrix(FoldcoreError):
    """A direct factorization met a pivot too small to trust."""


class Breakdown(FoldcoreError):
    """Arnoldi produced a zero vector before the residual tolerance was met."""


class SingularSystem(FoldcoreError):
    """An iterative backward solve stagnated above tolerance at full dimension."""


class DimensionMismatch(FoldcoreError):
    """Adjacent stages of a composed step disagree on dimensions."""


class InfeasibleMass(FoldcoreError):
    """Requested simplex mass exceeds the number of coordinates."""


class SubproblemInfeasible(FoldcoreError):
    """An SQP quadratic subproblem could not be solved."""


class StaleFixedPoint(FoldcoreError):
    """An oracle solution fails the layer's own fixed-point residual check."""


class NonFiniteLoss(FoldcoreError):
    """Training produced a non-finite loss or gradient."""


class UnsupportedProblemShape(FoldcoreError):
    """A layer factory was handed a problem outside its family."""
