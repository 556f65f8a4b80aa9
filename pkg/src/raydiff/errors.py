"""Exception types shared across the package."""


class RaydiffError(Exception):
    """Base class for package errors."""


class InvalidCameraError(RaydiffError, ValueError):
    """Camera fails a structural invariant (singular K, non-rigid extrinsics, ...)."""


class InvalidDepthError(RaydiffError, ValueError):
    """Depth value violates a precondition (non-positive, non-finite, ...)."""


class UndefinedOverlapError(RaydiffError, ValueError):
    """Overlap fraction requested for a view with zero valid depth pixels."""


class DegenerateSceneScaleError(RaydiffError, ValueError):
    """All conditioning translations are zero, so the scene scale is undefined."""


class ConfigError(RaydiffError, ValueError):
    """Configuration or shape mismatch detected before any compute."""


class SupervisionError(RaydiffError, ValueError):
    """A training sample supplies nothing to supervise."""


class ShardError(RaydiffError, ValueError):
    """A shard record is structurally invalid (length or checksum mismatch)."""


class CheckpointError(RaydiffError, ValueError):
    """A checkpoint file is corrupt or structurally invalid."""
