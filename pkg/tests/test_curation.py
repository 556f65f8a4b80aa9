"""Tests for conditioning-view selection."""

import math

import numpy as np
import pytest

from raydiff.codec import Task
from raydiff.curation import (
    CurationConfig,
    CuratedSample,
    curate_scene,
    max_pairwise_camera_distance,
    pair_is_valid,
    read_pair_manifest,
    valid_pairs,
    write_pair_manifest,
)
from raydiff.geometry import Camera, look_at_extrinsics
from raydiff.synth import Frame, SceneRecord, generate_scene

from oracles import oracle_overlap


def _camera(center, forward_to=None, f=10.0, w=10, h=10):
    center = np.asarray(center, dtype=np.float64)
    target = center + np.array([0.0, 1.0, 0.0]) if forward_to is None else np.asarray(forward_to, float)
    K = np.array([[f, 0.0, w / 2.0], [0.0, f, h / 2.0], [0.0, 0.0, 1.0]])
    return Camera(K=K, T=look_at_extrinsics(center, target), width=w, height=h)


def _frame(center, forward_to=None, depth=None, timestep=0.0, **kw):
    cam = _camera(center, forward_to, **kw)
    return Frame(image=np.zeros((cam.height, cam.width, 3), np.float32), depth=depth, camera=cam, timestep=timestep)


def _scene(frames, dynamic=False):
    return SceneRecord(scene_id="test", frames=frames, dynamic=dynamic)


def _oracle_pair_valid(source, target, task, cfg, diameter, dynamic):
    """Independent scalar reimplementation of every criterion."""
    d = math.dist(source.camera.center, target.camera.center)
    if not (cfg.min_distance_factor * diameter < d < cfg.max_distance_factor * diameter):
        return False
    if dynamic:
        gap = source.timestep - target.timestep
        if not (cfg.min_timestep_gap < gap < cfg.max_timestep_gap):
            return False
    cosang = float(np.dot(source.camera.forward, target.camera.forward))
    angle = math.acos(min(1.0, max(-1.0, cosang)))
    hi = cfg.max_angle_depth if task is Task.DEPTH else cfg.max_angle_image
    if not (cfg.min_angle <= angle <= hi):
        return False
    if source.depth is not None:
        depth = np.asarray(source.depth, np.float64)
        if not (np.isfinite(depth) & (depth > 0)).any():
            return False
        frac, count = oracle_overlap(source.camera, depth, target.camera)
        if frac < cfg.min_overlap or count < cfg.min_valid_projected:
            return False
    return True


class TestAgainstOracle:
    @pytest.mark.parametrize("layout", ["orbit", "dolly"])
    def test_valid_pairs_match_brute_force(self, layout):
        scene = generate_scene(seed=17, num_frames=8, layout=layout)
        cfg = CurationConfig()
        diameter = max_pairwise_camera_distance(scene.frames)
        for task in (Task.RGB, Task.DEPTH):
            got = valid_pairs(scene, task, cfg)
            expected = {
                (s, t)
                for s in range(8)
                for t in range(8)
                if s != t and _oracle_pair_valid(scene.frames[s], scene.frames[t], task, cfg, diameter, False)
            }
            assert got == expected
            assert got, "scene should yield at least one valid pair"

    def test_dynamic_scene_oracle(self):
        scene = generate_scene(seed=23, num_frames=12, layout="orbit", dynamic=True)
        cfg = CurationConfig(min_timestep_gap=-3.0, max_timestep_gap=3.0)
        diameter = max_pairwise_camera_distance(scene.frames)
        got = valid_pairs(scene, Task.RGB, cfg)
        expected = {
            (s, t)
            for s in range(12)
            for t in range(12)
            if s != t and _oracle_pair_valid(scene.frames[s], scene.frames[t], Task.RGB, cfg, diameter, True)
        }
        assert got == expected


class TestDistanceBoundaries:
    """c_M = 10 via a distant third camera; window is (0.5, 2.0) strictly."""

    def _scene_with(self, dist):
        frames = [
            _frame([0.0, 0.0, 0.0]),
            _frame([dist, 0.0, 0.0]),
            _frame([10.0, 0.0, 0.0]),
        ]
        return _scene(frames)

    def _check(self, dist):
        scene = self._scene_with(dist)
        cfg = CurationConfig()
        c_m = max_pairwise_camera_distance(scene.frames)
        assert c_m == 10.0
        return pair_is_valid(scene.frames[1], scene.frames[0], Task.RGB, cfg, c_m, False)

    def test_exactly_at_lower_bound_rejected(self):
        assert self._check(0.5) is False

    def test_just_above_lower_bound_accepted(self):
        assert self._check(0.5001) is True

    def test_exactly_at_upper_bound_rejected(self):
        assert self._check(2.0) is False

    def test_just_below_upper_bound_accepted(self):
        assert self._check(1.9999) is True

    def test_coincident_cameras_rejected(self):
        assert self._check(0.0) is False

    def test_two_frame_scene_never_passes_distance(self):
        # with only two frames, their separation IS the scene diameter,
        # which always exceeds the upper fraction of itself
        frames = [_frame([0, 0, 0]), _frame([1, 0, 0])]
        assert valid_pairs(_scene(frames), Task.RGB, CurationConfig()) == set()


class TestAngleBoundaries:
    def _pair(self, angle, task, max_angle_depth=math.pi / 2):
        # rotate the source's viewing direction by `angle` about z
        fwd = np.array([math.sin(angle), math.cos(angle), 0.0])
        src = _frame([1.0, 0.0, 0.0], forward_to=np.array([1.0, 0.0, 0.0]) + fwd)
        tgt = _frame([0.0, 0.0, 0.0], forward_to=[0.0, 1.0, 0.0])
        cfg = CurationConfig(max_angle_depth=max_angle_depth)
        return pair_is_valid(src, tgt, task, cfg, 10.0, False)

    def test_parallel_views_accepted(self):
        assert self._pair(0.0, Task.RGB) is True
        assert self._pair(0.0, Task.DEPTH) is True

    def test_right_angle_inclusive_for_depth(self):
        assert self._pair(math.pi / 2, Task.DEPTH) is True

    def test_beyond_right_angle_rejected_for_depth(self):
        assert self._pair(math.pi / 2 + 1e-3, Task.DEPTH) is False

    def test_opposed_views_accepted_for_images(self):
        assert self._pair(math.pi, Task.RGB) is True

    def test_opposed_views_rejected_for_depth(self):
        assert self._pair(math.pi, Task.DEPTH) is False


class TestTimestepBoundaries:
    def _pair(self, gap, dynamic=True):
        src = _frame([1.0, 0.0, 0.0], timestep=gap)
        tgt = _frame([0.0, 0.0, 0.0], timestep=0.0)
        return pair_is_valid(src, tgt, Task.RGB, CurationConfig(), 10.0, dynamic)

    def test_exactly_at_gap_rejected(self):
        assert self._pair(8.0) is False
        assert self._pair(-8.0) is False

    def test_within_gap_accepted(self):
        assert self._pair(7.0) is True
        assert self._pair(-7.0) is True

    def test_static_scene_ignores_timestep(self):
        assert self._pair(1000.0, dynamic=False) is True


class TestOverlapBoundaries:
    def test_full_overlap_count_inclusive(self):
        # 8x8 source moved back along its own axis: every projection lands
        # inside, count == 64 == the minimum, so the pair passes
        depth = np.full((8, 8), 5.0)
        src = _frame([0.0, -0.6, 0.0], depth=depth, f=8.0, w=8, h=8)
        tgt = _frame([0.0, 0.0, 0.0], f=8.0, w=8, h=8)
        cfg = CurationConfig()
        assert pair_is_valid(src, tgt, Task.RGB, cfg, 10.0, False) is True

    def test_one_invalid_pixel_drops_below_count(self):
        depth = np.full((8, 8), 5.0)
        depth[0, 0] = np.nan
        src = _frame([0.0, -0.6, 0.0], depth=depth, f=8.0, w=8, h=8)
        tgt = _frame([0.0, 0.0, 0.0], f=8.0, w=8, h=8)
        cfg = CurationConfig()
        assert pair_is_valid(src, tgt, Task.RGB, cfg, 10.0, False) is False

    def test_fraction_exactly_at_minimum_accepted(self):
        # sideways shift of 2*dx pixels leaves exactly 3 of 10 columns valid
        depth = np.full((10, 10), 5.0)
        src = _frame([3.3, 0.0, 0.0], depth=depth)
        tgt = _frame([0.0, 0.0, 0.0])
        cfg = CurationConfig(min_valid_projected=16)
        frac, count = oracle_overlap(src.camera, depth, tgt.camera)
        assert frac == pytest.approx(0.30)
        assert pair_is_valid(src, tgt, Task.RGB, cfg, 20.0, False) is True

    def test_fraction_below_minimum_rejected(self):
        depth = np.full((10, 10), 5.0)
        src = _frame([4.0, 0.0, 0.0], depth=depth)
        tgt = _frame([0.0, 0.0, 0.0])
        cfg = CurationConfig(min_valid_projected=16)
        frac, _ = oracle_overlap(src.camera, depth, tgt.camera)
        assert frac < 0.30
        assert pair_is_valid(src, tgt, Task.RGB, cfg, 25.0, False) is False

    def test_source_without_depth_skips_overlap(self):
        src = _frame([1.0, 0.0, 0.0], depth=None)
        tgt = _frame([0.0, 0.0, 0.0])
        assert pair_is_valid(src, tgt, Task.RGB, CurationConfig(), 10.0, False) is True

    def test_source_with_no_valid_depth_rejected(self):
        depth = np.full((10, 10), np.nan)
        src = _frame([1.0, 0.0, 0.0], depth=depth)
        tgt = _frame([0.0, 0.0, 0.0])
        assert pair_is_valid(src, tgt, Task.RGB, CurationConfig(), 10.0, False) is False


class TestGrouping:
    def _scene(self):
        # dense enough that interior targets have ~4 valid partners, so
        # grouping has genuine choices to make
        return generate_scene(seed=31, num_frames=16, layout="orbit")

    def test_deterministic(self):
        scene = self._scene()
        cfg = CurationConfig()
        assert curate_scene(scene, cfg, seed=5) == curate_scene(scene, cfg, seed=5)

    def test_seed_changes_groups(self):
        scene = self._scene()
        cfg = CurationConfig()
        assert curate_scene(scene, cfg, seed=5) != curate_scene(scene, cfg, seed=6)

    def test_groups_respect_validity_and_sizes(self):
        scene = self._scene()
        cfg = CurationConfig()
        pairs_rgb = valid_pairs(scene, Task.RGB, cfg)
        pairs_depth = valid_pairs(scene, Task.DEPTH, cfg)
        samples = curate_scene(scene, cfg, seed=5)
        assert samples
        per_target: dict[int, set] = {}
        for s in samples:
            assert cfg.min_views <= len(s.conditioning) <= cfg.max_views
            assert len(set(s.conditioning)) == len(s.conditioning)
            for c in s.conditioning:
                assert (c, s.target) in pairs_rgb
            if "depth" in s.tasks:
                for c in s.conditioning:
                    assert (c, s.target) in pairs_depth
            else:
                assert any((c, s.target) not in pairs_depth for c in s.conditioning) or not np.isfinite(
                    scene.frames[s.target].depth
                ).any()
            per_target.setdefault(s.target, set()).add(s.conditioning)
        for groups in per_target.values():
            assert len(groups) <= cfg.groups_per_target

    def test_targets_without_enough_partners_skipped(self):
        frames = [_frame([0, 0, 0]), _frame([1, 0, 0]), _frame([10, 0, 0])]
        samples = curate_scene(_scene_record(frames), CurationConfig(), seed=0)
        assert samples == []


def _scene_record(frames):
    return SceneRecord(scene_id="tiny", frames=frames)


class TestPairManifest:
    def test_round_trip(self, tmp_path):
        scene = generate_scene(seed=31, num_frames=8, layout="orbit")
        samples = curate_scene(scene, CurationConfig(), seed=3)
        path = tmp_path / "pairs.jsonl"
        write_pair_manifest(samples, path)
        assert read_pair_manifest(path) == samples

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "pairs.jsonl"
        path.write_text('{"format_version": 1, "kind": "frames"}\n')
        with pytest.raises(ValueError):
            read_pair_manifest(path)

    def test_empty_manifest_round_trip(self, tmp_path):
        path = tmp_path / "pairs.jsonl"
        write_pair_manifest([], path)
        assert read_pair_manifest(path) == []
