"""Exception types shared across the package."""


class FairsegError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FairsegError):
    """Array arguments have incompatible or invalid shapes."""


class DeterminismError(FairsegError):
    """An operation that must be deterministic produced differing results."""


class ConfigError(FairsegError):
    """Invalid configuration value or unknown configuration key."""


class FormatError(FairsegError):
    """Malformed binary or text artifact (dataset, checkpoint, report)."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class LabelError(FairsegError):
    """A label map contains ids outside the registered class set."""


class ProtocolError(FairsegError):
    """The continual-training protocol was violated (empty step, rehearsal access)."""


class StateError(FairsegError):
    """Operation applied to an object in an invalid state."""


class UnavailableError(FairsegError):
    """Requested value cannot be computed from the current state."""
