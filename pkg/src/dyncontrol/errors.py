"""Exception types shared across the package."""


class DynControlError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(DynControlError):
    """Invalid or inconsistent run configuration (CLI exit code 2)."""


class ScheduleError(DynControlError):
    """Visit schedule is invalid (non-increasing times, dt <= 0, ...)."""


class AlignmentError(DynControlError):
    """Array lengths do not line up with the visit schedule."""


class DegenerateModelError(DynControlError):
    """A required observation covariance is singular."""


class InvalidPosteriorError(DynControlError):
    """Posterior covariance is not symmetric positive semidefinite."""


class ContractError(DynControlError):
    """Operands of an operation do not share the required specification."""


class ResolutionError(DynControlError):
    """Grid propagation lost too much probability mass; refine the grid."""
