"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: usage errors exit 2,
data/parse errors exit 3, numeric or training failures exit 4.
"""


class SegVecError(Exception):
    """Base class for all package-specific errors."""


class InvalidArgumentError(SegVecError, ValueError):
    """A caller-supplied argument violates a precondition."""


class InvalidStateError(SegVecError, RuntimeError):
    """An operation was invoked against stale or inconsistent state."""


class DataError(SegVecError):
    """Input data is malformed (parse failures, non-finite values, ...)."""

    def __init__(self, message, *, line=None, offset=None):
        loc = ""
        if line is not None:
            loc = f" (line {line})"
        elif offset is not None:
            loc = f" (byte offset {offset})"
        super().__init__(message + loc)
        self.line = line
        self.offset = offset


class DegenerateSupervisionError(SegVecError):
    """Weak labels admit no valid positive or no valid negative pair."""


class DegenerateInstanceError(SegVecError):
    """An instance pooled to a zero feature vector."""


class DegenerateEmbeddingError(SegVecError):
    """A zero vector reached a cosine-similarity computation."""


class PlacementFailureError(SegVecError):
    """Scene generation could not place an object without overlap."""


class DimensionalityTooSmallError(SegVecError):
    """Requested near-orthogonal vectors do not fit in the given dimension."""


class InsufficientPairingError(SegVecError):
    """An alignment batch cannot reach two distinct instance-text pairs."""


class TrainingDivergedError(SegVecError):
    """A training loss became non-finite.

    Carries the last checkpoint taken before the bad step so callers can
    persist it.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class UnsupportedVersionError(SegVecError):
    """A checkpoint declares a format version this build does not know."""
