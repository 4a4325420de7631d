"""Exception hierarchy shared across the package."""


class PhisegError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatchError(PhisegError):
    """Tensor or grid shapes violate an operation's contract."""


class ConfigError(PhisegError):
    """Invalid or inconsistent configuration."""


class CheckpointError(PhisegError):
    """Checkpoint file is unreadable or incompatible with the requested config."""


class TrainingDiverged(PhisegError):
    """Training aborted because the loss became non-finite."""
