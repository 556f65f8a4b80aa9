"""Parameterizations mapping pixels, depth, and rays to network space.

- RGB: [0, 1] intensities map affinely onto [-1, 1] (P = 2 I - 1).
- Depth: log-remapped onto [-1, 1] relative to the scene scale s,
      P = 2 * log(D / (s * d_min)) / log(d_max / d_min) - 1,
  with the exact algebraic inverse
      D = s * d_min * exp((P + 1) / 2 * log(d_max / d_min)).
  Depth at s * d_min encodes to -1, at s * d_max to +1, and the log
  midpoint s * sqrt(d_min * d_max) to 0.
- Rays: per-pixel feature of the raw origin followed by Fourier features of
  origin and direction. The frequency ladder is geometrically spaced over
  [1, max_freq]; one trig function per rung, alternating sin, cos, sin, ...
  down the ladder, applied componentwise. Feature width is therefore
  3 * (n_origin + n_direction + 1).

Encoders are elementwise and strictly monotone (depth), so they commute
with per-pixel aggregation such as ensemble medians.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidDepthError
from .geometry import RayMap

__all__ = [
    "Task",
    "DepthRange",
    "RayEncoding",
    "encode_rgb",
    "decode_rgb",
    "encode_depth",
    "decode_depth",
    "encode_rays",
]


class Task(enum.Enum):
    """Prediction-token task labels and their per-pixel state widths."""

    RGB = 0
    DEPTH = 1

    @property
    def state_dim(self) -> int:
        return 3 if self is Task.RGB else 1


@dataclass(frozen=True)
class DepthRange:
    """Valid normalized depth interval [d_min, d_max] for the log codec."""

    d_min: float = 0.1
    d_max: float = 200.0

    def __post_init__(self) -> None:
        if not (0.0 < self.d_min < self.d_max):
            raise ValueError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")

    @property
    def log_span(self) -> float:
        return float(np.log(self.d_max / self.d_min))


def encode_rgb(image: np.ndarray, strict: bool = False) -> np.ndarray:
    """[0, 1] intensities to [-1, 1]. Out-of-range input clamps (or raises)."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = float(np.min(image, initial=0.0)), float(np.max(image, initial=1.0))
    if lo < 0.0 or hi > 1.0:
        if strict:
            raise ValueError(f"intensities outside [0, 1]: min {lo}, max {hi}")
        warnings.warn(f"clamping intensities outside [0, 1] (min {lo:.4g}, max {hi:.4g})", RuntimeWarning)
        image = np.clip(image, 0.0, 1.0)
    return 2.0 * image - 1.0


def decode_rgb(values: np.ndarray) -> np.ndarray:
    """Inverse of encode_rgb; clamps network output into the valid range."""
    values = np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0)
    return (values + 1.0) / 2.0


def encode_depth(
    depth: np.ndarray,
    scale: float,
    rng: DepthRange = DepthRange(),
    strict: bool = False,
) -> np.ndarray:
    """Log-remap metric depth onto [-1, 1] relative to scene scale `scale`.

    The only scale-dependent step is the single division D / scale, so
    encode(lambda D, lambda s) == encode(D, s) whenever the division is
    exact (bit-for-bit at power-of-two lambda). Valid input lies within
    [scale * d_min, scale * d_max]; values outside clamp (or raise when
    strict). Non-positive or non-finite depth always raises.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if not np.isfinite(scale) or scale <= 0.0:
        raise InvalidDepthError(f"scale must be positive and finite, got {scale}")
    if not np.all(np.isfinite(depth)) or np.any(depth <= 0.0):
        raise InvalidDepthError("depth must be finite and positive; mask invalid pixels before encoding")
    normalized = depth / scale
    if normalized.min(initial=rng.d_min) < rng.d_min or normalized.max(initial=rng.d_max) > rng.d_max:
        if strict:
            raise InvalidDepthError(
                f"normalized depth outside [{rng.d_min}, {rng.d_max}]: "
                f"min {normalized.min():.4g}, max {normalized.max():.4g}"
            )
        warnings.warn("clamping normalized depth into the codec range", RuntimeWarning)
        normalized = np.clip(normalized, rng.d_min, rng.d_max)
    return 2.0 * (np.log(normalized / rng.d_min) / rng.log_span) - 1.0


def decode_depth(values: np.ndarray, scale: float, rng: DepthRange = DepthRange()) -> np.ndarray:
    """Exact algebraic inverse of encode_depth, then back to metric units."""
    if not np.isfinite(scale) or scale <= 0.0:
        raise InvalidDepthError(f"scale must be positive and finite, got {scale}")
    values = np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0)
    return scale * rng.d_min * np.exp((values + 1.0) / 2.0 * rng.log_span)


@dataclass(frozen=True)
class RayEncoding:
    """Fourier feature layout for raymaps.

    Feature vector per pixel, in order:
      [origin (3)]
      [trig_k(f_k * origin), k = 0..n_origin-1, each 3 wide]
      [trig_k(f_k * direction), k = 0..n_direction-1, each 3 wide]
    where trig_k is sin for even k and cos for odd k, and f_k runs
    geometrically from 1 to max_freq. Layout changes are format changes.
    """

    n_origin: int = 8
    n_direction: int = 8
    max_freq: float = 100.0

    def __post_init__(self) -> None:
        if self.n_origin < 1 or self.n_direction < 1 or self.max_freq < 1.0:
            raise ValueError("need n_origin >= 1, n_direction >= 1, max_freq >= 1")

    @property
    def dim(self) -> int:
        return 3 * (self.n_origin + self.n_direction + 1)

    def frequencies(self, n: int) -> np.ndarray:
        return np.geomspace(1.0, self.max_freq, n)


def _fourier_ladder(x: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    """(..., 3) -> (..., 3 * len(freqs)); sin on even rungs, cos on odd."""
    angles = x[..., None, :] * freqs[:, None]  # (..., n, 3)
    out = np.empty_like(angles)
    out[..., 0::2, :] = np.sin(angles[..., 0::2, :])
    out[..., 1::2, :] = np.cos(angles[..., 1::2, :])
    return out.reshape(*x.shape[:-1], -1)


def encode_rays(raymap: RayMap, enc: RayEncoding = RayEncoding()) -> np.ndarray:
    """Per-pixel ray features, (H, W, enc.dim)."""
    o = raymap.origins
    d = raymap.directions
    parts = [
        o,
        _fourier_ladder(o, enc.frequencies(enc.n_origin)),
        _fourier_ladder(d, enc.frequencies(enc.n_direction)),
    ]
    out = np.concatenate(parts, axis=-1)
    assert out.shape[-1] == enc.dim
    return out
