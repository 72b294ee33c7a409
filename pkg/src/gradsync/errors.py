"""Exception hierarchy shared by every module."""


class GradsyncError(Exception):
    """Base class; the CLI maps uncategorised subclasses to exit code 1."""


class ConfigError(GradsyncError, ValueError):
    """Invalid configuration. ``field`` names the offending setting."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class MetadataMismatch(GradsyncError):
    """Ranks disagree on the metadata of a tensor with the same name."""


class DuplicateSubmission(GradsyncError):
    """A rank submitted the same request twice before it was answered."""


class CapacityExceeded(GradsyncError):
    """Response cache is full."""


class CapacityMismatch(GradsyncError):
    """Bitvectors of different widths were combined."""


class UnknownBit(GradsyncError):
    """A set payload bit has no cache entry (caches diverged)."""


class UnknownTensor(GradsyncError):
    """A response names a tensor that the group spec does not know."""


class LengthMismatch(GradsyncError):
    """Worker payloads for one tensor have different lengths."""


class MissingRecord(GradsyncError):
    """A required convolution timing record is absent."""


class DeadlockDetected(GradsyncError):
    """A step could not make progress, or ranks disagreed on collective order."""
