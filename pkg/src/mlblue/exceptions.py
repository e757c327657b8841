"""Exception types raised by the estimators and solvers."""


class MLBLUEError(Exception):
    """Base class for all numerical errors raised by :mod:`mlblue`."""


class InvalidStructureError(MLBLUEError, ValueError):
    """A coupling structure violates one of its invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid coupling structure: " + "; ".join(self.violations))


class SingularGroupCovariance(MLBLUEError):
    """The covariance matrix of one coupling group is (numerically) singular.

    A singular group matrix means one level of the group is an affine
    function of the others and carries no new information; remove it from
    the group (or, for matrix weights, do not interpolate coarse levels).
    """

    def __init__(self, group, cond=None, element=None, hint=None):
        self.group = group
        self.cond = cond
        self.element = element
        msg = f"covariance of coupling group k={group} is singular"
        if element is not None:
            msg += f" at element {element}"
        if cond is not None:
            msg += f" (condition number {cond:.3g})"
        msg += "; a level in this group is redundant and should be removed"
        if hint:
            msg += f". {hint}"
        super().__init__(msg)


class SingularPhi(MLBLUEError):
    """The aggregated precision matrix phi is singular (rank-deficient coverage)."""


class SingularSaddlePoint(MLBLUEError):
    """The KKT saddle-point matrix could not be factorized."""


class InfeasibleAllocation(MLBLUEError):
    """No sample allocation satisfies the budget / high-fidelity constraints."""


class UnreachableTarget(MLBLUEError):
    """The requested target variance cannot be reached."""


class DimensionMismatch(MLBLUEError, ValueError):
    """Array shapes are inconsistent with the coupling structure."""
