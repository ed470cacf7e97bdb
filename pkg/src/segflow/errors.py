"""Exception hierarchy shared across the package."""


class SegflowError(Exception):
    """Base class for all package-specific errors."""


class NumericBlowupError(SegflowError):
    """Raised when drift/diffusion or the integrated state turns non-finite.

    Carries the simulation time at which the first non-finite value appeared.
    """

    def __init__(self, message, time):
        super().__init__(f"{message} (at t={time:g})")
        self.time = float(time)


class EllipticityViolationError(SegflowError):
    """Raised when a sampled diffusion matrix is singular."""

    def __init__(self, message, sample_index, segment=None):
        super().__init__(message)
        self.sample_index = int(sample_index)
        self.segment = segment


class CapacityError(SegflowError):
    """Raised when an exact solver is asked for more atoms than its cap."""


class ShapeError(SegflowError):
    """Raised when segment collections have incompatible grids or dims."""


class MetricError(SegflowError):
    """Raised on internal inconsistencies inside the metric layer."""


class ConfigurationError(SegflowError):
    """Raised when an operation is missing required configuration."""


class EstimatorInconsistencyError(SegflowError):
    """Raised when an estimate contradicts a structural constraint."""


class ConfigError(SegflowError):
    """Raised on invalid experiment configuration files."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
