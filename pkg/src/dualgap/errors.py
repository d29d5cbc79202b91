"""Exception hierarchy. The CLI maps these onto exit codes."""


class DualGapError(Exception):
    """Base class for all package errors."""


class ArgumentError(DualGapError, ValueError):
    """Malformed input: bad shapes, out-of-range arguments, unknown keys."""


class InfeasibleError(DualGapError):
    """A problem or construction has no feasible point."""


class HypothesisViolation(DualGapError):
    """A theorem precondition does not hold for the given instance."""


class NumericalFailure(DualGapError, ArithmeticError):
    """An iteration diverged or a factorization failed."""


class GeometryError(DualGapError):
    """Degenerate geometric input (coincident or collinear anchors)."""


class MembershipError(DualGapError):
    """A point lies outside the convex hull it was expected to belong to.

    ``direction`` is a unit vector ``u`` with ``<u, y>`` exceeding the hull's
    support value in that direction.
    """

    def __init__(self, message, direction=None):
        super().__init__(message)
        self.direction = direction
