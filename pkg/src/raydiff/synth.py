"""Synthetic multi-view scene generation with analytic ground truth.

Scenes are closed textured rooms containing a few solid primitives, rendered
by exact ray casting: per-pixel color comes from view-independent procedural
textures (Lambertian by construction, so cross-view photometric consistency
is exact) and depth is the analytic z-depth of the nearest hit. One wall
carries a circular window; rays leaving through it produce sky color and an
invalid (NaN) depth so downstream code sees realistic holes.

Determinism: layout randomness (palette, object placement) and the camera
path are driven by separate child streams of the scene seed, and trajectory
poses are smooth closed-form functions of the frame fraction u = k/(n-1).
Regenerating the same seed with a different frame count therefore samples
the identical scene along the identical path, just more or less densely.
A camera placement that would intersect scene geometry retries with the
next draw from its stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, compute_raymap, look_at_extrinsics

__all__ = ["Frame", "SceneRecord", "generate_scene", "render_view", "SceneSpec"]

_ROOM_LO = np.array([-3.2, -3.2, 0.0])
_ROOM_HI = np.array([3.2, 3.2, 2.6])
# circular windows, keyed by room face id (axis * 2 + is_hi): the -x wall
# faces the orbit path, the +y wall faces the dolly track
_WINDOWS = {0: np.array([0.0, 1.3]), 3: np.array([1.3, 0.0])}  # coords follow each face's cyclic other-axes order
_WINDOW_RADIUS = 0.8
_SKY = np.array([0.55, 0.75, 0.95])
_EPS = 1e-9


@dataclass
class Frame:
    """One captured view: 8-bit-quantized image, z-depth (NaN invalid), pose."""

    image: np.ndarray
    depth: np.ndarray | None
    camera: Camera
    timestep: float


@dataclass
class SceneRecord:
    scene_id: str
    frames: list[Frame]
    metric: bool = True
    dynamic: bool = False


@dataclass(frozen=True)
class _Sphere:
    center: np.ndarray
    radius: float
    color_a: np.ndarray
    color_b: np.ndarray

    def move(self, offset: np.ndarray) -> "_Sphere":
        return _Sphere(self.center + offset, self.radius, self.color_a, self.color_b)


@dataclass(frozen=True)
class _Box:
    lo: np.ndarray
    hi: np.ndarray
    base_color: np.ndarray


@dataclass(frozen=True)
class SceneSpec:
    """Analytic scene content plus trajectory parameters."""

    spheres: tuple[_Sphere, ...]
    boxes: tuple[_Box, ...]
    face_colors: np.ndarray  # (6, 2, 3) checker color pairs per room face
    checker_cell: float
    layout: str
    path_radius: float
    path_height: float
    look_target: np.ndarray
    arc_radians: float
    dynamic_velocity: np.ndarray


def _palette_color(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.15, 0.95, size=3)


def _build_spec(seed: int, layout: str, dynamic: bool) -> SceneSpec:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    face_colors = np.stack(
        [np.stack([_palette_color(rng), _palette_color(rng)]) for _ in range(6)]
    )
    checker_cell = float(rng.uniform(1.0, 1.6))
    path_radius = 1.8
    path_height = float(rng.uniform(0.95, 1.15))
    look_target = np.array([0.0, 0.0, 0.8]) + rng.uniform(-0.08, 0.08, size=3)

    spheres: list[_Sphere] = []
    boxes: list[_Box] = []
    n_spheres = int(rng.integers(1, 3))
    n_boxes = int(rng.integers(1, 3))
    keepout = 0.25  # margin between any camera position and any surface

    def _placement_ok(center: np.ndarray, radius: float) -> bool:
        # camera paths live on a horizontal circle (orbit) or a straight
        # track (dolly); test a dense sampling of both candidate paths
        u = np.linspace(0.0, 1.0, 64)
        orbit = np.stack(
            [path_radius * np.cos(u * 2 * np.pi), path_radius * np.sin(u * 2 * np.pi), np.full_like(u, path_height)],
            axis=-1,
        )
        track = np.stack([(u - 0.5) * 2.4, np.full_like(u, -1.5), np.full_like(u, path_height)], axis=-1)
        for path in (orbit, track):
            if np.linalg.norm(path - center, axis=-1).min() < radius + keepout:
                return False
        return True

    for _ in range(n_spheres):
        for _ in range(64):
            r = float(rng.uniform(0.3, 0.5))
            c = np.array([*rng.uniform(-0.8, 0.8, size=2), r + rng.uniform(0.0, 0.6)])
            if _placement_ok(c, r):
                spheres.append(_Sphere(c, r, _palette_color(rng), _palette_color(rng)))
                break
    for _ in range(n_boxes):
        for _ in range(64):
            half = rng.uniform(0.2, 0.45, size=3)
            c = np.array([*rng.uniform(-0.8, 0.8, size=2), half[2] + rng.uniform(0.0, 0.3)])
            if _placement_ok(c, float(np.linalg.norm(half))):
                boxes.append(_Box(c - half, c + half, _palette_color(rng)))
                break

    velocity = rng.uniform(-1.0, 1.0, size=3) * 0.02 if dynamic else np.zeros(3)
    return SceneSpec(
        spheres=tuple(spheres),
        boxes=tuple(boxes),
        face_colors=face_colors,
        checker_cell=checker_cell,
        layout=layout,
        path_radius=path_radius,
        path_height=path_height,
        look_target=look_target,
        arc_radians=math.radians(90.0),
        dynamic_velocity=velocity,
    )


def _camera_pose(spec: SceneSpec, u: float) -> np.ndarray:
    if spec.layout == "orbit":
        angle = u * spec.arc_radians
        eye = np.array(
            [
                spec.path_radius * math.cos(angle),
                spec.path_radius * math.sin(angle),
                spec.path_height + 0.12 * math.sin(2.0 * math.pi * u),
            ]
        )
        return look_at_extrinsics(eye, spec.look_target)
    if spec.layout == "dolly":
        eye = np.array([(u - 0.5) * 2.4, -1.5, spec.path_height])
        # constant viewing direction: a pure-translation rig
        return look_at_extrinsics(eye, eye + np.array([0.0, 1.0, -0.12]))
    raise ValueError(f"unknown layout {spec.layout!r}")


def _intrinsics(width: int, height: int) -> np.ndarray:
    f = 0.9 * max(width, height)
    return np.array([[f, 0.0, width / 2.0], [0.0, f, height / 2.0], [0.0, 0.0, 1.0]])


def _room_exit(origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exit distance and face id (axis * 2 + is_hi) for rays starting inside."""
    with np.errstate(divide="ignore"):
        t_hi = (_ROOM_HI - origins) / dirs
        t_lo = (_ROOM_LO - origins) / dirs
    t_pos = np.where(dirs > 0, t_hi, np.where(dirs < 0, t_lo, np.inf))
    axis = np.argmin(t_pos, axis=-1)
    t_exit = np.take_along_axis(t_pos, axis[..., None], axis=-1)[..., 0]
    is_hi = np.take_along_axis(dirs, axis[..., None], axis=-1)[..., 0] > 0
    return t_exit, axis * 2 + is_hi.astype(np.int64)


def _checker(points: np.ndarray, face: np.ndarray, spec: SceneSpec) -> np.ndarray:
    axis = face // 2
    others = np.stack([(axis + 1) % 3, (axis + 2) % 3], axis=-1)
    uv = np.take_along_axis(points, others, axis=-1)
    parity = (np.floor(uv[..., 0] / spec.checker_cell) + np.floor(uv[..., 1] / spec.checker_cell)) % 2
    pair = spec.face_colors[face]  # (..., 2, 3)
    return np.where(parity[..., None] == 0, pair[..., 0, :], pair[..., 1, :])


def _sphere_hit(origins, dirs, sphere: _Sphere):
    oc = origins - sphere.center
    b = np.sum(oc * dirs, axis=-1)
    c = np.sum(oc * oc, axis=-1) - sphere.radius**2
    disc = b * b - c
    with np.errstate(invalid="ignore"):
        t = -b - np.sqrt(np.maximum(disc, 0.0))
    return np.where((disc > 0) & (t > _EPS), t, np.inf)


def _sphere_color(points, sphere: _Sphere):
    band = np.floor((points[..., 2] - sphere.center[2]) / sphere.radius * 2.5)
    return np.where((band % 2 == 0)[..., None], sphere.color_a, sphere.color_b)


def _box_hit(origins, dirs, box: _Box):
    with np.errstate(divide="ignore"):
        t0 = (box.lo - origins) / dirs
        t1 = (box.hi - origins) / dirs
    tn = np.minimum(t0, t1)
    tf = np.maximum(t0, t1)
    t_enter = np.max(np.where(np.isnan(tn), -np.inf, tn), axis=-1)
    t_exit = np.min(np.where(np.isnan(tf), np.inf, tf), axis=-1)
    hit = (t_enter <= t_exit) & (t_enter > _EPS)
    face_axis = np.argmax(np.where(np.isnan(tn), -np.inf, tn), axis=-1)
    return np.where(hit, t_enter, np.inf), face_axis


def _box_color(face_axis, box: _Box):
    shade = 0.75 + 0.1 * face_axis[..., None]
    return np.clip(box.base_color * shade, 0.0, 1.0)


def render_view(spec: SceneSpec, camera: Camera, timestep: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Exact render: image (H, W, 3) float32 on the 8-bit grid, z-depth (H, W) float32."""
    rm = compute_raymap(camera)
    origins, dirs = rm.origins, rm.directions

    t_room, face = _room_exit(origins, dirs)
    p_room = origins + t_room[..., None] * dirs
    color = _checker(p_room, face, spec)

    # wall windows: sky color, invalid depth
    sky = np.zeros(face.shape, dtype=bool)
    for face_id, center in _WINDOWS.items():
        axis = face_id // 2
        others = [(axis + 1) % 3, (axis + 2) % 3]
        in_disk = (p_room[..., others[0]] - center[0]) ** 2 + (
            p_room[..., others[1]] - center[1]
        ) ** 2 < _WINDOW_RADIUS**2
        sky |= (face == face_id) & in_disk
    t_best = np.where(sky, np.inf, t_room)
    color = np.where(sky[..., None], _SKY, color)

    offset = spec.dynamic_velocity * timestep
    for sphere in spec.spheres:
        moved = sphere.move(offset)
        t = _sphere_hit(origins, dirs, moved)
        closer = t < t_best
        if closer.any():
            pts = origins + np.where(closer, t, 0.0)[..., None] * dirs
            color = np.where(closer[..., None], _sphere_color(pts, moved), color)
            t_best = np.where(closer, t, t_best)
    for box in spec.boxes:
        t, face_axis = _box_hit(origins, dirs, box)
        closer = t < t_best
        if closer.any():
            color = np.where(closer[..., None], _box_color(face_axis, box), color)
            t_best = np.where(closer, t, t_best)

    hit_points = origins + np.where(np.isfinite(t_best), t_best, 0.0)[..., None] * dirs
    z_depth = hit_points @ camera.R[2] + camera.t[2]
    depth = np.where(np.isfinite(t_best), z_depth, np.nan)

    image = np.round(np.clip(color, 0.0, 1.0) * 255.0) / 255.0
    return image.astype(np.float32), depth.astype(np.float32)


def generate_scene(
    seed: int,
    num_frames: int = 24,
    width: int = 32,
    height: int = 32,
    layout: str = "orbit",
    dynamic: bool = False,
) -> SceneRecord:
    """Deterministic synthetic scene; same seed + layout = same geometry."""
    if num_frames < 1:
        raise ValueError(f"num_frames must be >= 1, got {num_frames}")
    spec = _build_spec(seed, layout, dynamic)
    K = _intrinsics(width, height)
    frames = []
    for k in range(num_frames):
        u = k / max(num_frames - 1, 1)
        T = _camera_pose(spec, u)
        camera = Camera(K=K.copy(), T=T, width=width, height=height)
        timestep = float(k)
        image, depth = render_view(spec, camera, timestep=timestep if dynamic else 0.0)
        frames.append(Frame(image=image, depth=depth, camera=camera, timestep=timestep))
    return SceneRecord(scene_id=f"scene-{layout}-{seed:04d}", frames=frames, metric=True, dynamic=dynamic)
