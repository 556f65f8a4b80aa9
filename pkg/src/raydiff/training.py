"""Training loop: noise regression over curated conditioning groups.

Each optimizer step draws a batch of curated samples sharing one shape
signature (view count, depth supervision or not), builds conditioning
tokens (image embeddings at quarter resolution concatenated with ray
features of the matching low-res cameras), noises encoded target pixels
at a uniformly drawn timestep, and regresses the injected noise: squared
error for color tokens plus absolute error for depth tokens, equally
weighted. Prediction pixels split evenly between the two tasks when both
are supervised; depth tokens are only placed on pixels with valid ground
truth.

All per-step randomness comes from a counter-based stream seeded by
(seed, stream, step), so training consumes no ambient RNG state and a
resumed run replays the identical batch and noise sequence: resuming from
a checkpoint is bit-equivalent to never having stopped.

The learning rate follows linear warmup then cosine decay, computed in
closed form from the step counter (no scheduler state to persist).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from .checkpoint import Checkpoint, restore_optimizer
from .codec import encode_depth, encode_rays, encode_rgb
from .config import RunConfig
from .curation import CuratedSample
from .denoiser import Denoiser, TokenBatch
from .diffusion import EmaTracker, NoiseSchedule, q_sample
from .errors import ConfigError, SupervisionError
from .geometry import compute_raymap
from .scene_scale import normalize_scene
from .synth import SceneRecord

__all__ = ["Trainer", "build_token_batch", "learning_rate_at"]

_STREAM_BATCH = 1


def learning_rate_at(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`."""
    if warmup_steps >= total_steps:
        raise ConfigError(f"warmup_steps {warmup_steps} must be < total steps {total_steps}")
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


@dataclass
class _Prepared:
    batch: TokenBatch
    eps_rgb: torch.Tensor | None
    eps_depth: torch.Tensor | None


def _pixel_split(pred_tokens: int, with_depth: bool) -> tuple[int, int]:
    if not with_depth:
        return pred_tokens, 0
    rgb = pred_tokens // 2
    return rgb, pred_tokens - rgb


def build_token_batch(
    model: Denoiser,
    schedule: NoiseSchedule,
    picked: list[CuratedSample],
    scenes: dict[str, SceneRecord],
    config: RunConfig,
    rng: np.random.Generator,
) -> _Prepared:
    """Assemble one training batch. Every sample must share the same view
    count, and either all or none carry depth supervision."""

    n_views = len(picked[0].conditioning)
    with_depth = "depth" in picked[0].tasks
    for s in picked:
        if len(s.conditioning) != n_views or ("depth" in s.tasks) != with_depth:
            raise ConfigError("batch mixes shape signatures")

    height = config.data.height
    width = config.data.width
    if height % 4 or width % 4:
        raise ConfigError(f"image size {width}x{height} must be divisible by 4")
    n_pixels = height * width
    m_rgb, m_depth = _pixel_split(min(config.train.pred_tokens, n_pixels), with_depth)

    images, scene_rays = [], []
    rgb_rays, rgb_x0, rgb_pixels = [], [], []
    depth_rays, depth_x0, depth_pixels = [], [], []
    for sample in picked:
        scene = scenes[sample.scene_id]
        cond = [scene.frames[i] for i in sample.conditioning]
        target = scene.frames[sample.target]
        ns = normalize_scene(
            [f.camera for f in cond],
            target.camera,
            depth=target.depth if with_depth else None,
            max_depth=config.depth_range.d_max,
        )

        images.append(np.stack([encode_rgb(f.image) for f in cond]))
        scene_rays.append(
            np.stack([encode_rays(compute_raymap(cam.scaled(0.25)), config.rays).reshape(-1, config.rays.dim) for cam in ns.conditioning])
        )
        target_rays = encode_rays(compute_raymap(ns.target), config.rays).reshape(-1, config.rays.dim)

        idx_rgb = rng.choice(n_pixels, size=m_rgb, replace=False)
        rgb_rays.append(target_rays[idx_rgb])
        rgb_x0.append(encode_rgb(target.image.reshape(-1, 3)[idx_rgb]))
        rgb_pixels.append(idx_rgb)

        if with_depth:
            flat = ns.depth.reshape(-1)
            valid = np.flatnonzero(np.isfinite(flat) & (flat > 0))
            if valid.size == 0:
                raise SupervisionError(f"{sample.scene_id} frame {sample.target} has no valid depth to supervise")
            idx_d = rng.choice(valid, size=m_depth, replace=valid.size < m_depth)
            depth_rays.append(target_rays[idx_d])
            depth_x0.append(encode_depth(flat[idx_d], scale=1.0, rng=config.depth_range)[..., None])
            depth_pixels.append(idx_d)

    b = len(picked)
    t = torch.from_numpy(rng.integers(1, schedule.num_steps + 1, size=b))

    # conditioning tokens: quarter-resolution image embeddings + ray features
    image_tensor = torch.from_numpy(np.stack(images)).to(torch.float32).reshape(b * n_views, 3, height, width)
    tokens, _, _ = model.tokenizer(image_tensor)
    per_view = tokens.shape[1]
    keep = min(config.train.scene_tokens_per_view, per_view)
    sel = np.stack([rng.choice(per_view, size=keep, replace=False) for _ in range(b * n_views)])
    sel_t = torch.from_numpy(sel)[:, :, None]
    tokens = torch.take_along_dim(tokens, sel_t, dim=1).reshape(b, n_views * keep, -1)
    ray_feats = np.take_along_axis(
        np.stack(scene_rays).reshape(b * n_views, per_view, -1), sel[:, :, None], axis=1
    ).reshape(b, n_views * keep, -1)
    scene_tokens = torch.cat([tokens, torch.from_numpy(ray_feats).to(torch.float32)], dim=-1)

    def _noise(x0_list):
        x0 = torch.from_numpy(np.stack(x0_list)).to(torch.float32)
        eps = torch.from_numpy(rng.standard_normal(x0.shape)).to(torch.float32)
        return q_sample(x0, t, eps, schedule), eps

    rgb_state, eps_rgb = _noise(rgb_x0)
    batch_kwargs = dict(
        scene=scene_tokens,
        t=t,
        rgb_rays=torch.from_numpy(np.stack(rgb_rays)).to(torch.float32),
        rgb_state=rgb_state,
        rgb_pixels=np.stack(rgb_pixels),
    )
    eps_depth = None
    if with_depth:
        depth_state, eps_depth = _noise(depth_x0)
        batch_kwargs.update(
            depth_rays=torch.from_numpy(np.stack(depth_rays)).to(torch.float32),
            depth_state=depth_state,
            depth_pixels=np.stack(depth_pixels),
        )
    return _Prepared(batch=TokenBatch(**batch_kwargs), eps_rgb=eps_rgb, eps_depth=eps_depth)


class Trainer:
    """Owns the model, optimizer, EMA shadows, and the step counter."""

    def __init__(
        self,
        model: Denoiser,
        schedule: NoiseSchedule,
        config: RunConfig,
        scenes: dict[str, SceneRecord],
        samples: list[CuratedSample],
    ):
        if not samples:
            raise ConfigError("no training samples were provided")
        missing = {s.scene_id for s in samples} - set(scenes)
        if missing:
            raise ConfigError(f"samples reference unknown scenes: {sorted(missing)}")
        self.model = model
        self.schedule = schedule
        self.config = config
        self.scenes = scenes
        self.pools: dict[tuple[int, bool], list[CuratedSample]] = {}
        for s in samples:
            self.pools.setdefault((len(s.conditioning), "depth" in s.tasks), []).append(s)
        self.pool_keys = sorted(self.pools)
        tc = config.train
        self.optimizer = torch.optim.AdamW(
            model.parameters(), lr=tc.lr, betas=(tc.beta1, tc.beta2), weight_decay=tc.weight_decay
        )
        self.ema = EmaTracker(model, decay=tc.ema_decay)
        self.step = 0
        self._start_time = time.monotonic()

    def restore(self, ckpt: Checkpoint) -> None:
        """Resume from a checkpoint; training continues bit-identically."""
        self.model.load_state_dict(ckpt.model_state)
        if ckpt.ema_state is not None:
            self.ema.load_state_dict({"decay": self.config.train.ema_decay, "shadow": ckpt.ema_state})
        if ckpt.opt_exp_avg is not None:
            restore_optimizer(self.optimizer, self.model, ckpt)
        self.step = ckpt.step

    def _rng(self, step: int) -> np.random.Generator:
        return np.random.default_rng([self.config.train.seed, _STREAM_BATCH, step])

    def _pick_batch(self, rng: np.random.Generator) -> list[CuratedSample]:
        sizes = np.array([len(self.pools[k]) for k in self.pool_keys], dtype=np.float64)
        key = self.pool_keys[int(rng.choice(len(self.pool_keys), p=sizes / sizes.sum()))]
        pool = self.pools[key]
        picks = rng.integers(0, len(pool), size=self.config.train.batch_size)
        return [pool[int(i)] for i in picks]

    def train_step(self) -> dict:
        tc = self.config.train
        rng = self._rng(self.step)
        picked = self._pick_batch(rng)
        prepared = build_token_batch(self.model, self.schedule, picked, self.scenes, self.config, rng)

        lr = learning_rate_at(self.step, tc.lr, tc.warmup_steps, tc.steps)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

        self.model.train()
        out = self.model(prepared.batch)
        loss_rgb = torch.mean((out.rgb - prepared.eps_rgb) ** 2)
        loss_depth = (
            torch.mean(torch.abs(out.depth - prepared.eps_depth))
            if prepared.eps_depth is not None
            else torch.zeros(())
        )
        loss = loss_rgb + loss_depth
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.ema.update(self.model)
        self.step += 1
        return {
            "step": self.step,
            "loss": float(loss.detach()),
            "loss_rgb": float(loss_rgb.detach()),
            "loss_depth": float(loss_depth.detach()),
            "lr": lr,
            "ema_decay": self.ema.decay,
            "wall_time": time.monotonic() - self._start_time,
        }

    def run(self, until_step: int, log_stream=None, log_every: int | None = None, on_checkpoint=None) -> dict:
        """Advance to `until_step`, appending JSONL rows to `log_stream`."""
        every = log_every if log_every is not None else self.config.train.log_every
        row = {}
        while self.step < until_step:
            row = self.train_step()
            if log_stream is not None and (row["step"] % every == 0 or row["step"] == until_step):
                log_stream.write(json.dumps(row) + "\n")
                log_stream.flush()
            if on_checkpoint is not None and (
                row["step"] % self.config.train.checkpoint_every == 0 or row["step"] == until_step
            ):
                on_checkpoint(self)
        return row
