"""Scene scale normalization.

Re-expresses every conditioning camera relative to the target view (the
target's own extrinsics become the identity), then divides translations and
ground-truth depth by a single scene scale s: the largest absolute
translation component across all conditioning views and axes. If the
normalized depth still exceeds `max_depth`, the scale is enlarged once so
the normalized maximum equals `max_depth` exactly. Predicted depth returns
to metric units by multiplying with s.

Rotations are never touched: scale lives in translations and depth only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSceneScaleError, InvalidDepthError
from .geometry import Camera, relative_extrinsics

__all__ = ["NormalizedScene", "normalize_scene", "denormalize_depth", "SCALE_FLOOR"]

# Substitute scale when every conditioning translation is exactly zero and
# the caller asked for clamping instead of an error.
SCALE_FLOOR = 1e-6


@dataclass(frozen=True)
class NormalizedScene:
    """Conditioning + target cameras in the target frame, at unit scene scale.

    `conditioning` and `target` carry normalized extrinsics (the target's is
    the identity). `scale` converts normalized depth back to input units.
    `depth` is the normalized target depth map when ground truth was given,
    with NaN marking invalid pixels.
    """

    conditioning: tuple[Camera, ...]
    target: Camera
    scale: float
    depth: np.ndarray | None
    rescaled: bool

    def __post_init__(self) -> None:
        if not np.isfinite(self.scale) or self.scale <= 0.0:
            raise DegenerateSceneScaleError(f"scene scale must be positive, got {self.scale}")
        limit = 1.0 + 1e-9
        for cam in self.conditioning:
            if np.abs(cam.t).max() > limit:
                raise DegenerateSceneScaleError("normalized translation component exceeds 1")


def _valid_depth_max(depth: np.ndarray) -> float:
    ok = np.isfinite(depth) & (depth > 0.0)
    if not ok.any():
        return 0.0
    return float(depth[ok].max())


def normalize_scene(
    conditioning: list[Camera] | tuple[Camera, ...],
    target: Camera,
    depth: np.ndarray | None = None,
    max_depth: float = 200.0,
    on_degenerate: str = "raise",
) -> NormalizedScene:
    """Normalize a conditioning set and target view to unit scene scale.

    `depth` is the target's ground-truth z-depth (NaN or <= 0 marks invalid
    pixels); omit it at inference time. `on_degenerate` selects the reaction
    to an all-zero translation set: "raise" (data curation) or "clamp"
    (inference; substitutes SCALE_FLOOR with a warning).
    """
    if len(conditioning) == 0:
        raise ValueError("need at least one conditioning view")
    if on_degenerate not in ("raise", "clamp"):
        raise ValueError(f"on_degenerate must be 'raise' or 'clamp', got {on_degenerate!r}")
    if depth is not None:
        depth = np.asarray(depth, dtype=np.float64)
        if depth.shape != (target.height, target.width):
            raise InvalidDepthError(f"depth shape {depth.shape} does not match target {target.height}x{target.width}")

    rels = [relative_extrinsics(cam, target) for cam in conditioning]
    scale = max(float(np.abs(rel[:3, 3]).max()) for rel in rels)
    if scale == 0.0:
        if on_degenerate == "raise":
            raise DegenerateSceneScaleError("all conditioning translations are zero")
        warnings.warn("all conditioning translations are zero; clamping scene scale to 1e-6", RuntimeWarning)
        scale = SCALE_FLOOR

    norm_depth = None
    rescaled = False
    if depth is not None:
        norm_depth = depth / scale
        peak = _valid_depth_max(norm_depth)
        if peak > max_depth:
            # Enlarge the scale so the normalized maximum is max_depth
            # bit-exactly: evaluate as (D / peak) * max_depth.
            rescaled = True
            scale = scale * (peak / max_depth)
            norm_depth = (norm_depth / peak) * max_depth
        norm_depth = np.where(np.isfinite(depth) & (depth > 0.0), norm_depth, np.nan)

    norm_cams = []
    for cam, rel in zip(conditioning, rels):
        T = np.array(rel)
        T[:3, 3] = rel[:3, 3] / scale
        norm_cams.append(cam.with_extrinsics(T))
    norm_target = target.with_extrinsics(np.eye(4))
    return NormalizedScene(
        conditioning=tuple(norm_cams),
        target=norm_target,
        scale=scale,
        depth=norm_depth,
        rescaled=rescaled,
    )


def denormalize_depth(depth: np.ndarray, scale: float) -> np.ndarray:
    """Map normalized depth back to input units: multiply by the scene scale."""
    if not np.isfinite(scale) or scale <= 0.0:
        raise DegenerateSceneScaleError(f"scene scale must be positive, got {scale}")
    return np.asarray(depth, dtype=np.float64) * scale
