"""Pinhole camera algebra on float64 numpy arrays.

Conventions, used package-wide:

- Extrinsics are world-to-camera rigid transforms: x_cam = R @ x_world + t,
  stored as a 4x4 matrix T = [[R, t], [0, 1]].
- Pixel (i, j) covers the unit square [i, i+1) x [j, j+1) of the image plane;
  its center is (i + 0.5, j + 0.5). Grid-enumerating operations (raymaps,
  unprojection, overlap counting) cast rays through pixel centers.
  `project_depth` itself is shift-free: continuous coordinates in,
  continuous coordinates out.
- Image coordinates are (u, v) with u horizontal (column direction, bounded
  by width) and v vertical (row direction, bounded by height).
- Depth is z-depth: the camera-frame z coordinate of the point, not the
  Euclidean distance along the ray.

Everything here is float64; callers cast to float32 only at the network
boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidCameraError, InvalidDepthError, UndefinedOverlapError

__all__ = [
    "Camera",
    "RayMap",
    "PointCloud",
    "ProjectedGrid",
    "rigid_inverse",
    "look_at_extrinsics",
    "compute_raymap",
    "relative_extrinsics",
    "project_depth",
    "project_depth_grid",
    "unproject",
    "overlap_fraction",
    "write_ply",
    "read_ply",
]

_EYE_BOTTOM_ROW = np.array([0.0, 0.0, 0.0, 1.0])


def _as_f64(a: np.ndarray | Sequence[float], shape: tuple[int, ...], name: str) -> np.ndarray:
    out = np.asarray(a, dtype=np.float64)
    if out.shape != shape:
        raise InvalidCameraError(f"{name} must have shape {shape}, got {out.shape}")
    if not np.all(np.isfinite(out)):
        raise InvalidCameraError(f"{name} contains non-finite values")
    return out


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics K (3x3), world-to-camera extrinsics T (4x4), size."""

    K: np.ndarray
    T: np.ndarray
    width: int
    height: int

    def __post_init__(self) -> None:
        K = _as_f64(self.K, (3, 3), "K")
        T = _as_f64(self.T, (4, 4), "T")
        if K[0, 0] <= 0.0 or K[1, 1] <= 0.0:
            raise InvalidCameraError(f"focal lengths must be positive, got {K[0, 0]}, {K[1, 1]}")
        if K[2, 0] != 0.0 or K[2, 1] != 0.0 or K[2, 2] != 1.0 or K[0, 1] != 0.0 or K[1, 0] != 0.0:
            raise InvalidCameraError("K must be upper-triangular with unit bottom-right entry")
        R = T[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise InvalidCameraError("extrinsic rotation is not orthonormal")
        if not np.isclose(np.linalg.det(R), 1.0, atol=1e-9):
            raise InvalidCameraError("extrinsic rotation has negative or non-unit determinant")
        if not np.allclose(T[3], _EYE_BOTTOM_ROW, atol=0.0):
            raise InvalidCameraError("extrinsics bottom row must be [0, 0, 0, 1]")
        if self.width <= 0 or self.height <= 0:
            raise InvalidCameraError(f"image size must be positive, got {self.width}x{self.height}")
        K.setflags(write=False)
        T.setflags(write=False)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "T", T)

    @property
    def R(self) -> np.ndarray:
        return self.T[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.T[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates: -R^T t."""
        return -self.R.T @ self.t

    @property
    def forward(self) -> np.ndarray:
        """Unit viewing direction in world coordinates: R^T [0, 0, 1]."""
        return self.R.T @ np.array([0.0, 0.0, 1.0])

    def with_extrinsics(self, T: np.ndarray) -> "Camera":
        return Camera(K=np.array(self.K), T=np.asarray(T, dtype=np.float64), width=self.width, height=self.height)

    def scaled(self, factor: float) -> "Camera":
        """Camera observing the same scene at a resolution scaled by `factor`.

        Intrinsics scale linearly, so the center of low-res pixel (i, j) casts
        the same ray as full-res coordinate ((i + 0.5) / factor, ...).
        """
        w = int(round(self.width * factor))
        h = int(round(self.height * factor))
        if w <= 0 or h <= 0:
            raise InvalidCameraError(f"scaled size {w}x{h} is empty")
        K = np.array(self.K)
        K[0, :] *= factor
        K[1, :] *= factor
        return Camera(K=K, T=np.array(self.T), width=w, height=h)


@dataclass(frozen=True)
class RayMap:
    """Per-pixel ray origins and unit directions in world coordinates, (H, W, 3)."""

    origins: np.ndarray
    directions: np.ndarray

    def __post_init__(self) -> None:
        o = np.asarray(self.origins, dtype=np.float64)
        d = np.asarray(self.directions, dtype=np.float64)
        if o.shape != d.shape or o.ndim != 3 or o.shape[2] != 3:
            raise InvalidCameraError(f"raymap shapes must match (H, W, 3), got {o.shape}, {d.shape}")
        norms = np.linalg.norm(d, axis=-1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise InvalidCameraError("ray directions must be unit length")
        object.__setattr__(self, "origins", o)
        object.__setattr__(self, "directions", d)


@dataclass(frozen=True)
class PointCloud:
    """World-space points (N, 3) with per-point RGB colors (N, 3) in [0, 1]."""

    points: np.ndarray
    colors: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        c = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if p.shape != c.shape:
            raise ValueError(f"points {p.shape} and colors {c.shape} must align")
        if not np.all(np.isfinite(p)):
            raise ValueError("points contain non-finite values")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "colors", np.clip(c, 0.0, 1.0))

    def __len__(self) -> int:
        return self.points.shape[0]


def rigid_inverse(T: np.ndarray) -> np.ndarray:
    """Closed-form inverse of a rigid 4x4 transform: [R^T, -R^T t]."""
    R = T[:3, :3]
    t = T[:3, 3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ t
    return out


def look_at_extrinsics(eye: np.ndarray, target: np.ndarray, up: np.ndarray | None = None) -> np.ndarray:
    """World-to-camera extrinsics for a camera at `eye` looking toward `target`.

    Camera axes: +z forward (toward target), +x right, +y down, so the
    default up vector maps to decreasing v.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.array([0.0, 0.0, 1.0]) if up is None else np.asarray(up, dtype=np.float64)
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise InvalidCameraError("look-at target coincides with the eye position")
    fwd = fwd / n
    right = np.cross(fwd, up)
    rn = np.linalg.norm(right)
    if rn < 1e-12:
        raise InvalidCameraError("up vector is parallel to the viewing direction")
    right = right / rn
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ eye
    return T


def _pixel_center_grid(width: int, height: int) -> np.ndarray:
    """(H, W, 3) homogeneous pixel centers [u + 0.5, v + 0.5, 1]."""
    u = np.arange(width, dtype=np.float64) + 0.5
    v = np.arange(height, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv, np.ones_like(uu)], axis=-1)


def compute_raymap(camera: Camera) -> RayMap:
    """World-space ray through every pixel center: direction (K R)^-1 [u+.5, v+.5, 1], normalized."""
    KR = camera.K @ camera.R
    det = np.linalg.det(KR)
    if abs(det) < 1e-12:
        raise InvalidCameraError("K @ R is singular")
    grid = _pixel_center_grid(camera.width, camera.height)
    dirs = grid @ np.linalg.inv(KR).T
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.center, dirs.shape).copy()
    return RayMap(origins=origins, directions=dirs)


def relative_extrinsics(source: Camera, target: Camera) -> np.ndarray:
    """Source extrinsics expressed with the target frame as the world: T_s @ T_t^-1."""
    out = source.T @ rigid_inverse(target.T)
    out[3] = _EYE_BOTTOM_ROW
    return out


def _homogeneous_intrinsics(K: np.ndarray) -> np.ndarray:
    out = np.eye(4)
    out[:3, :3] = K
    return out


def _inv_homogeneous_intrinsics(K: np.ndarray) -> np.ndarray:
    fx, fy = K[0, 0], K[1, 1]
    cx, cy = K[0, 2], K[1, 2]
    out = np.eye(4)
    out[0, 0] = 1.0 / fx
    out[1, 1] = 1.0 / fy
    out[0, 2] = -cx / fx
    out[1, 2] = -cy / fy
    return out


def _lift_matrix(source: Camera, target: Camera) -> np.ndarray:
    """4x4 map acting on lifted pixels [u d, v d, d, 1] of the source camera."""
    return (
        _homogeneous_intrinsics(target.K)
        @ relative_extrinsics(target, source)
        @ _inv_homogeneous_intrinsics(source.K)
    )


@dataclass(frozen=True)
class ProjectedPixel:
    u: float
    v: float
    depth: float
    valid: bool


def project_depth(pixel: tuple[float, float], depth: float, source: Camera, target: Camera) -> ProjectedPixel:
    """Reproject a source pixel with known z-depth into the target view.

    Applies the homogeneous-intrinsics transfer map to the lifted pixel
    [u d, v d, d, 1]. Validity means the result lands inside the target
    image bounds (u' in [0, W], v' in [0, H]) with positive depth.
    """
    if not np.isfinite(depth) or depth <= 0.0:
        raise InvalidDepthError(f"depth must be finite and positive, got {depth}")
    u, v = float(pixel[0]), float(pixel[1])
    h = _lift_matrix(source, target) @ np.array([u * depth, v * depth, depth, 1.0])
    d_out = h[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u_out = h[0] / d_out
        v_out = h[1] / d_out
    valid = bool(
        d_out > 0.0
        and np.isfinite(u_out)
        and np.isfinite(v_out)
        and 0.0 <= u_out <= target.width
        and 0.0 <= v_out <= target.height
    )
    return ProjectedPixel(u=float(u_out), v=float(v_out), depth=float(d_out), valid=valid)


@dataclass(frozen=True)
class ProjectedGrid:
    """Vectorized reprojection of a full depth map; arrays are (H, W)."""

    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    valid: np.ndarray


def _depth_valid_mask(depth: np.ndarray, valid_mask: np.ndarray | None) -> np.ndarray:
    ok = np.isfinite(depth) & (depth > 0.0)
    if valid_mask is not None:
        ok &= np.asarray(valid_mask, dtype=bool)
    return ok


def project_depth_grid(
    depth: np.ndarray,
    source: Camera,
    target: Camera,
    valid_mask: np.ndarray | None = None,
) -> ProjectedGrid:
    """`project_depth` for every valid pixel center of the source view at once."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (source.height, source.width):
        raise InvalidDepthError(f"depth shape {depth.shape} does not match camera {source.height}x{source.width}")
    ok = _depth_valid_mask(depth, valid_mask)
    grid = _pixel_center_grid(source.width, source.height)
    d = np.where(ok, depth, 1.0)
    lifted = np.concatenate([grid * d[..., None], np.ones_like(d)[..., None]], axis=-1)
    h = lifted @ _lift_matrix(source, target).T
    d_out = h[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u_out = h[..., 0] / d_out
        v_out = h[..., 1] / d_out
    valid = (
        ok
        & (d_out > 0.0)
        & np.isfinite(u_out)
        & np.isfinite(v_out)
        & (u_out >= 0.0)
        & (u_out <= target.width)
        & (v_out >= 0.0)
        & (v_out <= target.height)
    )
    return ProjectedGrid(u=u_out, v=v_out, depth=d_out, valid=valid)


def unproject(
    image: np.ndarray,
    depth: np.ndarray,
    camera: Camera,
    valid_mask: np.ndarray | None = None,
) -> PointCloud:
    """Lift every valid pixel to a colored world-space point.

    The camera-frame point for pixel (i, j) with z-depth d is
    d * K^-1 [i + 0.5, j + 0.5, 1]; the world point applies the inverse
    extrinsics.
    """
    depth = np.asarray(depth, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if depth.shape != (camera.height, camera.width):
        raise InvalidDepthError(f"depth shape {depth.shape} does not match camera {camera.height}x{camera.width}")
    if image.shape != (camera.height, camera.width, 3):
        raise ValueError(f"image shape {image.shape} must be (H, W, 3)")
    ok = _depth_valid_mask(depth, valid_mask)
    grid = _pixel_center_grid(camera.width, camera.height)
    Kinv = _inv_homogeneous_intrinsics(camera.K)[:3, :3]
    cam_pts = (grid @ Kinv.T) * depth[..., None]
    world = (cam_pts - camera.t) @ camera.R
    return PointCloud(points=world[ok], colors=image[ok])


@dataclass(frozen=True)
class OverlapResult:
    fraction: float
    count: int


def overlap_fraction(
    source: Camera,
    source_depth: np.ndarray,
    target: Camera,
    valid_mask: np.ndarray | None = None,
) -> OverlapResult:
    """Fraction of valid source pixels whose reprojection lands inside the target.

    A projection counts when it is in-bounds with positive depth; no
    occlusion test is applied. Raises when the source has no valid pixels.
    """
    depth = np.asarray(source_depth, dtype=np.float64)
    ok = _depth_valid_mask(depth, valid_mask)
    n_valid = int(ok.sum())
    if n_valid == 0:
        raise UndefinedOverlapError("source view has zero valid depth pixels")
    proj = project_depth_grid(depth, source, target, valid_mask=valid_mask)
    count = int(proj.valid.sum())
    return OverlapResult(fraction=count / n_valid, count=count)


_PLY_HEADER = """ply
format binary_little_endian 1.0
element vertex {n}
property float x
property float y
property float z
property uchar red
property uchar green
property uchar blue
end_header
"""


def write_ply(cloud: PointCloud, path: str) -> None:
    """Binary little-endian PLY with float32 positions and uint8 colors."""
    n = len(cloud)
    rec = np.zeros(
        n,
        dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")],
    )
    pts = cloud.points.astype(np.float32)
    rgb = np.clip(np.round(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    rec["red"], rec["green"], rec["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    with open(path, "wb") as f:
        f.write(_PLY_HEADER.format(n=n).encode("ascii"))
        f.write(rec.tobytes())


def read_ply(path: str) -> PointCloud:
    """Read clouds produced by `write_ply` (positions + uint8 colors only)."""
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if end < 0:
        raise ValueError("not a PLY file produced by write_ply")
    header = data[:end].decode("ascii")
    n = 0
    for line in header.splitlines():
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
    body = data[end + len(b"end_header\n"):]
    rec = np.frombuffer(
        body,
        dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")],
        count=n,
    )
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=-1).astype(np.float64)
    rgb = np.stack([rec["red"], rec["green"], rec["blue"]], axis=-1).astype(np.float64) / 255.0
    return PointCloud(points=pts, colors=rgb)
