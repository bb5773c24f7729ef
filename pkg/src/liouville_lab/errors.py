"""Exception types shared by the package."""


class LiouvilleError(Exception):
    """Base class for everything raised deliberately by this package."""


class ConfigurationError(LiouvilleError):
    """Malformed or inconsistent input: non-square matrix, coincident
    points, bad config schema, parameters off the constraint surface."""


class InfeasibleRayError(LiouvilleError):
    """The ray s*rho0 never meets the zero set of the quadratic form."""


class NonIntegrableError(LiouvilleError):
    """A mass integral diverges: some asymptotic mass m_i <= 2."""


class StiffnessError(LiouvilleError):
    """The radial integrator collapsed its step size."""


class ConvergenceError(LiouvilleError):
    """An iteration (Newton, fixed point, extrapolation, grid
    refinement) failed to reach its tolerance.  Carries the best
    iterate and the residual history so callers can diagnose."""

    def __init__(self, message, best=None, residuals=None):
        super().__init__(message)
        self.best = best
        self.residuals = residuals


class DegenerateProjectionError(LiouvilleError):
    """A Gram matrix or cutoff pairing needed for a projection is
    numerically singular."""


class RequiresProjectionError(LiouvilleError):
    """An unprojected solve hit a near-singular operator; re-run through
    the projected path."""


class SingularEvaluationError(LiouvilleError):
    """Evaluation requested at a point where the quantity is singular,
    e.g. the Green's function on its diagonal."""
