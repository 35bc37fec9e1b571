"""Exception types shared across the package."""


class ExitlimError(Exception):
    """Base class for all package-specific errors."""


class NoExitError(ExitlimError):
    """Deterministic flow reached the time horizon without leaving the domain."""


class NonFiniteError(ExitlimError):
    """Simulated state left the blow-up guard box (radius 1e6)."""


class AcceptanceTooLowError(ExitlimError):
    """Rejection sampling exhausted its trial budget before the target count.

    The partial batch collected so far is attached as ``batch``.
    """

    def __init__(self, message, batch=None):
        super().__init__(message)
        self.batch = batch


class HUnderflowError(ExitlimError):
    """An exit-probability value fell below the representable floor (1e-290)."""


class NonTransversalError(ExitlimError):
    """Drift is tangent (or nearly tangent) where transversality is required."""


class OutsideRegionError(ExitlimError):
    """Point cannot be resolved inside the valid characteristic region."""


class SingularPhiError(ExitlimError):
    """Flow linearization is numerically singular at a quadrature node."""


class NoConvergenceError(ExitlimError):
    """Iterative elliptic solve hit the sweep budget above tolerance."""


class RegionInvalidError(ExitlimError):
    """Requested comparison region contains invalid grid nodes."""


class MalformedExitPointError(ExitlimError):
    """Exit point has a nonzero component off the exit-face hyperplane."""


class DegeneratePredictionError(ExitlimError):
    """Predicted limit covariance is numerically singular."""


class ConfigError(ExitlimError):
    """Experiment configuration is missing or malformed; message names the key."""
