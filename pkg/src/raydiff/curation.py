"""Selection of conditioning views for each target view.

A conditioning view has to be useful for predicting the target: close enough
to share content but not redundant, captured at a nearby time when the scene
moves, oriented within a task-dependent angle of the target, and actually
overlapping it. All thresholds live in :class:`CurationConfig`.

Criteria for an ordered pair (source -> target), checked in this order:

1. camera-center distance d: ``c_min < d < c_max`` (strict), where the
   bounds are fractions of the scene's maximum pairwise center distance;
2. capture-time gap (dynamic scenes only): ``t_min < dt < t_max`` (strict);
3. viewing-direction angle in ``[min_angle, max_angle]`` (inclusive), with
   a tighter maximum for depth than for images;
4. when the source has depth: reprojected overlap fraction ``>= min_overlap``
   and at least ``min_valid_projected`` pixels landing in the target.

Grouping into training samples is seeded and reproducible: each target draws
``groups_per_target`` conditioning sets (sizes ``min_views..max_views``) from
its valid partners. A group supervises depth as well as color only when every
member is depth-valid for the target and the target itself has depth.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass

import numpy as np

from .codec import Task
from .errors import UndefinedOverlapError
from .geometry import overlap_fraction
from .synth import Frame, SceneRecord

__all__ = [
    "CurationConfig",
    "CuratedSample",
    "max_pairwise_camera_distance",
    "pair_is_valid",
    "valid_pairs",
    "curate_scene",
    "write_pair_manifest",
    "read_pair_manifest",
]

PAIR_MANIFEST_VERSION = 1


@dataclass(frozen=True)
class CurationConfig:
    min_distance_factor: float = 0.05
    max_distance_factor: float = 0.2
    min_timestep_gap: float = -8.0
    max_timestep_gap: float = 8.0
    min_angle: float = 0.0
    max_angle_image: float = math.pi
    max_angle_depth: float = math.pi / 2.0
    min_overlap: float = 0.30
    min_valid_projected: int = 64
    min_views: int = 2
    max_views: int = 5
    groups_per_target: int = 4

    def max_angle(self, task: Task) -> float:
        return self.max_angle_depth if task is Task.DEPTH else self.max_angle_image


@dataclass(frozen=True)
class CuratedSample:
    """One training example: conditioning frame indices for a target frame."""

    scene_id: str
    target: int
    conditioning: tuple[int, ...]
    tasks: tuple[str, ...]


def max_pairwise_camera_distance(frames: list[Frame]) -> float:
    centers = np.stack([f.camera.center for f in frames])
    diff = centers[:, None, :] - centers[None, :, :]
    return float(np.sqrt((diff**2).sum(-1)).max())


def _viewing_angle(a: Frame, b: Frame) -> float:
    cos = float(np.clip(np.dot(a.camera.forward, b.camera.forward), -1.0, 1.0))
    return math.acos(cos)


def pair_is_valid(
    source: Frame,
    target: Frame,
    task: Task,
    config: CurationConfig,
    scene_diameter: float,
    dynamic: bool,
) -> bool:
    """Apply every criterion to the ordered pair (source conditions target)."""
    dist = float(np.linalg.norm(source.camera.center - target.camera.center))
    lo = config.min_distance_factor * scene_diameter
    hi = config.max_distance_factor * scene_diameter
    if not (lo < dist < hi):
        return False

    if dynamic:
        gap = source.timestep - target.timestep
        if not (config.min_timestep_gap < gap < config.max_timestep_gap):
            return False

    angle = _viewing_angle(source, target)
    if not (config.min_angle <= angle <= config.max_angle(task)):
        return False

    if source.depth is not None:
        try:
            result = overlap_fraction(source.camera, np.asarray(source.depth, dtype=np.float64), target.camera)
        except UndefinedOverlapError:
            return False
        if result.fraction < config.min_overlap or result.count < config.min_valid_projected:
            return False
    return True


def valid_pairs(scene: SceneRecord, task: Task, config: CurationConfig) -> set[tuple[int, int]]:
    """All ordered (source, target) index pairs passing every criterion."""
    diameter = max_pairwise_camera_distance(scene.frames) if len(scene.frames) > 1 else 0.0
    pairs: set[tuple[int, int]] = set()
    for si, source in enumerate(scene.frames):
        for ti, target in enumerate(scene.frames):
            if si == ti:
                continue
            if pair_is_valid(source, target, task, config, diameter, scene.dynamic):
                pairs.add((si, ti))
    return pairs


def _target_has_depth(frame: Frame) -> bool:
    return frame.depth is not None and bool(np.isfinite(frame.depth).any())


def curate_scene(scene: SceneRecord, config: CurationConfig, seed: int) -> list[CuratedSample]:
    """Draw reproducible conditioning groups for every eligible target."""
    pairs_rgb = valid_pairs(scene, Task.RGB, config)
    pairs_depth = valid_pairs(scene, Task.DEPTH, config)
    scene_key = zlib.crc32(scene.scene_id.encode("utf-8"))

    samples: list[CuratedSample] = []
    for ti, target in enumerate(scene.frames):
        partners = sorted(s for s, t in pairs_rgb if t == ti)
        if len(partners) < config.min_views:
            continue
        depth_partners = {s for s, t in pairs_depth if t == ti}
        depth_ok = _target_has_depth(target)
        rng = np.random.default_rng([seed, scene_key, ti])
        seen: set[tuple[int, ...]] = set()
        attempts = 0
        while len(seen) < config.groups_per_target and attempts < config.groups_per_target * 8:
            attempts += 1
            k = int(rng.integers(config.min_views, min(config.max_views, len(partners)) + 1))
            group = tuple(sorted(rng.choice(partners, size=k, replace=False).tolist()))
            if group in seen:
                continue
            seen.add(group)
            tasks = ("rgb", "depth") if depth_ok and all(g in depth_partners for g in group) else ("rgb",)
            samples.append(CuratedSample(scene.scene_id, ti, group, tasks))
    return samples


def write_pair_manifest(samples: list[CuratedSample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format_version": PAIR_MANIFEST_VERSION, "kind": "pairs", "count": len(samples)}) + "\n")
        for s in samples:
            fh.write(
                json.dumps(
                    {
                        "scene": s.scene_id,
                        "target": s.target,
                        "conditioning": list(s.conditioning),
                        "tasks": list(s.tasks),
                    }
                )
                + "\n"
            )


def read_pair_manifest(path) -> list[CuratedSample]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("kind") != "pairs" or header.get("format_version") != PAIR_MANIFEST_VERSION:
            raise ValueError(f"not a pair manifest (header {header})")
        samples = []
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            samples.append(
                CuratedSample(row["scene"], int(row["target"]), tuple(row["conditioning"]), tuple(row["tasks"]))
            )
    return samples
