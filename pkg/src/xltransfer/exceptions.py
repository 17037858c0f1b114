"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A configuration or precondition is invalid."""


class SchemaError(ValueError):
    """A data record does not match its task schema."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class LifecycleError(RuntimeError):
    """An operation needs state that has not been set up (e.g. a missing head)."""


class CheckpointError(ValueError):
    """A checkpoint file is corrupt or unreadable."""


class CheckpointVersionError(CheckpointError):
    """A checkpoint was written by an unsupported format version."""


class ConfigMismatchError(CheckpointError):
    """A checkpoint's encoder config disagrees with the one expected."""
