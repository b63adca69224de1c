"""Exception hierarchy shared by all bregctl modules."""


class BregctlError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(BregctlError):
    """A domain type was constructed with data violating its invariants."""


class DomainError(BregctlError):
    """A convex function was evaluated outside its effective domain."""


class UnboundedDualError(BregctlError):
    """The Fenchel supremum diverges in the queried direction."""


class OutOfRangeError(BregctlError):
    """Gradient inversion target lies outside the gradient range and no
    domain boundary resolves it."""


class ConvergenceError(BregctlError):
    """An iterative solver exhausted its budget.  Carries the last residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DivergenceError(BregctlError):
    """Riccati fixed-point iteration diverged (non-stabilizable pair)."""


class UnsupportedConfigurationError(BregctlError):
    """Requested a design the toolkit deliberately does not cover
    (e.g. underactuated state-cost-first synthesis)."""


class InfeasibleDerivationError(BregctlError):
    """A derived companion cost failed convexity or positivity.  Carries the
    worst violation observed on the check grid."""

    def __init__(self, message, worst_violation=None):
        super().__init__(message)
        self.worst_violation = worst_violation


class InfeasibleSearchError(BregctlError):
    """No feasible value-function matrix was found.  Carries the best
    margins seen during the search."""

    def __init__(self, message, best_margins=None):
        super().__init__(message)
        self.best_margins = best_margins


class InsufficientHypothesesError(BregctlError):
    """The system matrix is unstable and no quadratic bounds on the dual
    control cost are available, so neither feasibility route applies."""


class FamilyInfeasibilityError(BregctlError):
    """Closed-form family parameters violate a printed feasibility
    inequality.  The message names the inequality."""


class MalformedTrajectoryError(BregctlError):
    """A trajectory is missing records required by the cost accounting."""


class ConfigError(BregctlError):
    """A run configuration failed schema or coherence validation."""
