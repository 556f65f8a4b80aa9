"""Latent-token denoiser.

A small set of learned latent tokens does all the heavy computation; image
and ray tokens only talk to the latents through cross-attention. Each block
runs: read (latents attend to every scene and prediction token), a stack of
self-attention + feed-forward pairs on the latents, then write (prediction
tokens attend back to the latents). Scene tokens are never rewritten.
All residual paths are pre-norm.

Conditioning views enter as tokens from a strided convolutional tokenizer
(1/4 resolution) concatenated with Fourier ray features; prediction tokens
concatenate ray features, a task embedding, and the current noisy state.
The timestep enters twice: added to the latent initialization and to every
prediction-token projection. Per-task linear heads (zero-initialized) map
written prediction tokens to the per-pixel noise estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
import torch.nn as nn
from einops import rearrange

from .codec import Task
from .errors import ConfigError

__all__ = ["DenoiserConfig", "TokenBatch", "DenoiserOutput", "Denoiser", "duplicate_latents"]


@dataclass(frozen=True)
class DenoiserConfig:
    num_blocks: int = 6
    block_depth: int = 4
    num_heads: int = 16
    num_latents: int = 256
    latent_dim: int = 1024
    token_dim: int = 1024
    image_embed_dim: int = 256
    task_dim: int = 128
    ray_dim: int = 51
    time_dim: int = 128
    ff_mult: int = 4
    conv_channels: tuple[int, int] = (64, 128)

    def __post_init__(self) -> None:
        for name in ("num_blocks", "block_depth", "num_heads", "num_latents", "latent_dim",
                     "token_dim", "image_embed_dim", "task_dim", "ray_dim", "time_dim", "ff_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.latent_dim % self.num_heads or self.token_dim % self.num_heads:
            raise ConfigError(
                f"latent_dim {self.latent_dim} and token_dim {self.token_dim} "
                f"must be divisible by num_heads {self.num_heads}"
            )

    @property
    def scene_token_dim(self) -> int:
        return self.image_embed_dim + self.ray_dim


@dataclass
class TokenBatch:
    """Inputs for one denoiser forward.

    scene: (B, S, image_embed_dim + ray_dim) conditioning tokens.
    rgb_rays/rgb_state: (B, Mr, ray_dim) and (B, Mr, 3) for RGB prediction
    tokens; depth_rays/depth_state: (B, Md, ray_dim) and (B, Md, 1). Either
    task group may be absent. t: (B,) integer timesteps. The pixel index
    arrays are bookkeeping for callers (scatter targets), not model inputs.
    """

    scene: torch.Tensor
    t: torch.Tensor
    rgb_rays: torch.Tensor | None = None
    rgb_state: torch.Tensor | None = None
    depth_rays: torch.Tensor | None = None
    depth_state: torch.Tensor | None = None
    rgb_pixels: object = None
    depth_pixels: object = None


@dataclass
class DenoiserOutput:
    rgb: torch.Tensor | None
    depth: torch.Tensor | None


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Transformer-style sinusoidal embedding of integer timesteps, (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        torch.arange(half, dtype=torch.float64, device=t.device) * (-math.log(10000.0) / max(half - 1, 1))
    )
    angles = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def _count_attention_flops(flops: dict | None, label: str, b: int, lq: int, lk: int, dim: int) -> None:
    if flops is not None:
        flops[label] = flops.get(label, 0) + 2 * b * lq * lk * dim


class Attention(nn.Module):
    """Pre-norm multi-head attention; queries and context may differ in width."""

    def __init__(self, q_dim: int, kv_dim: int, num_heads: int, label: str, cross: bool = True):
        super().__init__()
        self.num_heads = num_heads
        self.label = label
        self.scale = (q_dim // num_heads) ** -0.5
        self.norm_q = nn.LayerNorm(q_dim)
        self.norm_kv = nn.LayerNorm(kv_dim) if cross else None
        self.to_q = nn.Linear(q_dim, q_dim, bias=False)
        self.to_k = nn.Linear(kv_dim, q_dim, bias=False)
        self.to_v = nn.Linear(kv_dim, q_dim, bias=False)
        self.to_out = nn.Linear(q_dim, q_dim, bias=False)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None, flops: dict | None = None) -> torch.Tensor:
        q_in = self.norm_q(x)
        kv_in = q_in if context is None else self.norm_kv(context)
        q = rearrange(self.to_q(q_in), "b n (h d) -> b h n d", h=self.num_heads)
        k = rearrange(self.to_k(kv_in), "b n (h d) -> b h n d", h=self.num_heads)
        v = rearrange(self.to_v(kv_in), "b n (h d) -> b h n d", h=self.num_heads)
        _count_attention_flops(flops, self.label, x.shape[0], q.shape[2], k.shape[2], q.shape[1] * q.shape[3])
        scores = torch.einsum("b h i d, b h j d -> b h i j", q, k) * self.scale
        attn = scores.softmax(dim=-1)
        out = torch.einsum("b h i j, b h j d -> b h i d", attn, v)
        return x + self.to_out(rearrange(out, "b h n d -> b n (h d)"))


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.net = nn.Sequential(nn.Linear(dim, dim * mult), nn.GELU(), nn.Linear(dim * mult, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.net(self.norm(x))


class LatentBlock(nn.Module):
    """read -> block_depth x (self-attention + FFN) -> write."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.read = Attention(cfg.latent_dim, cfg.token_dim, cfg.num_heads, label="read")
        self.read_ff = FeedForward(cfg.latent_dim, cfg.ff_mult)
        self.latent_layers = nn.ModuleList()
        for _ in range(cfg.block_depth):
            self.latent_layers.append(
                Attention(cfg.latent_dim, cfg.latent_dim, cfg.num_heads, label="latent_self", cross=False)
            )
            self.latent_layers.append(FeedForward(cfg.latent_dim, cfg.ff_mult))
        self.write = Attention(cfg.token_dim, cfg.latent_dim, cfg.num_heads, label="write")
        self.write_ff = FeedForward(cfg.token_dim, cfg.ff_mult)

    def forward(
        self,
        latents: torch.Tensor,
        scene: torch.Tensor,
        pred: torch.Tensor,
        flops: dict | None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        tokens = torch.cat([scene, pred], dim=1)
        latents = self.read(latents, tokens, flops=flops)
        latents = self.read_ff(latents)
        for layer in self.latent_layers:
            latents = layer(latents, flops=flops) if isinstance(layer, Attention) else layer(latents)
        pred = self.write(pred, latents, flops=flops)
        pred = self.write_ff(pred)
        return latents, pred


class ImageTokenizer(nn.Module):
    """Three strided convolutions to 1/4 resolution, then a linear embedding.

    Inputs not divisible by 4 are zero-padded on the bottom/right; tokens
    whose 4x4 cell lies fully in the padding are reported invalid.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        c1, c2 = cfg.conv_channels
        self.convs = nn.Sequential(
            nn.Conv2d(3, c1, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(c2, c2, 3, stride=1, padding=1),
        )
        self.embed = nn.Linear(c2, cfg.image_embed_dim)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int], torch.Tensor]:
        """(B, 3, H, W) in [-1, 1] -> tokens (B, h4*w4, D_I), grid size, valid mask (h4*w4,)."""
        b, c, h, w = images.shape
        if c != 3:
            raise ConfigError(f"expected 3 input channels, got {c}")
        pad_h = (-h) % 4
        pad_w = (-w) % 4
        if pad_h or pad_w:
            images = torch.nn.functional.pad(images, (0, pad_w, 0, pad_h))
        feats = self.convs(images)
        tokens = self.embed(rearrange(feats, "b c h w -> b (h w) c"))
        h4, w4 = feats.shape[2], feats.shape[3]
        rows = torch.arange(h4, device=images.device) * 4 < h
        cols = torch.arange(w4, device=images.device) * 4 < w
        valid = (rows[:, None] & cols[None, :]).reshape(-1)
        return tokens, (h4, w4), valid


class Denoiser(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        cfg = config
        self.latents = nn.Parameter(torch.randn(cfg.num_latents, cfg.latent_dim) * 0.02)
        self.tokenizer = ImageTokenizer(cfg)
        self.scene_proj = nn.Linear(cfg.scene_token_dim, cfg.token_dim)
        self.task_embed = nn.Embedding(len(Task), cfg.task_dim)
        self.rgb_proj = nn.Linear(cfg.ray_dim + cfg.task_dim + Task.RGB.state_dim, cfg.token_dim)
        self.depth_proj = nn.Linear(cfg.ray_dim + cfg.task_dim + Task.DEPTH.state_dim, cfg.token_dim)
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, cfg.time_dim), nn.GELU())
        self.time_to_latent = nn.Linear(cfg.time_dim, cfg.latent_dim)
        self.time_to_token = nn.Linear(cfg.time_dim, cfg.token_dim)
        self.blocks = nn.ModuleList(LatentBlock(cfg) for _ in range(cfg.num_blocks))
        self.rgb_head_norm = nn.LayerNorm(cfg.token_dim)
        self.rgb_head = nn.Linear(cfg.token_dim, Task.RGB.state_dim)
        self.depth_head_norm = nn.LayerNorm(cfg.token_dim)
        self.depth_head = nn.Linear(cfg.token_dim, Task.DEPTH.state_dim)
        nn.init.zeros_(self.rgb_head.weight)
        nn.init.zeros_(self.rgb_head.bias)
        nn.init.zeros_(self.depth_head.weight)
        nn.init.zeros_(self.depth_head.bias)
        self.count_flops = False
        self.last_flops: dict | None = None

    def _dtype(self) -> torch.dtype:
        return self.latents.dtype

    def _check(self, batch: TokenBatch) -> None:
        cfg = self.config
        if batch.scene.ndim != 3 or batch.scene.shape[-1] != cfg.scene_token_dim:
            raise ConfigError(
                f"scene tokens must be (B, S, {cfg.scene_token_dim}), got {tuple(batch.scene.shape)}"
            )
        if batch.t.ndim != 1 or batch.t.shape[0] != batch.scene.shape[0]:
            raise ConfigError(f"timesteps must be (B,), got {tuple(batch.t.shape)}")
        has_any = False
        for rays, state, task in (
            (batch.rgb_rays, batch.rgb_state, Task.RGB),
            (batch.depth_rays, batch.depth_state, Task.DEPTH),
        ):
            if rays is None and state is None:
                continue
            if rays is None or state is None:
                raise ConfigError(f"{task.name} rays and state must both be present")
            if rays.shape[-1] != cfg.ray_dim:
                raise ConfigError(f"{task.name} ray features must be {cfg.ray_dim} wide, got {rays.shape[-1]}")
            if state.shape[-1] != task.state_dim:
                raise ConfigError(f"{task.name} state must be {task.state_dim} wide, got {state.shape[-1]}")
            if rays.shape[:2] != state.shape[:2] or rays.shape[0] != batch.scene.shape[0]:
                raise ConfigError(f"{task.name} token shapes do not align with the batch")
            has_any = True
        if not has_any:
            raise ConfigError("batch carries no prediction tokens")

    def _project_pred(self, rays: torch.Tensor, state: torch.Tensor, task: Task, temb_tok: torch.Tensor) -> torch.Tensor:
        b, m, _ = rays.shape
        task_vec = self.task_embed.weight[task.value].to(rays.dtype).expand(b, m, -1)
        feats = torch.cat([rays, task_vec, state], dim=-1)
        proj = self.rgb_proj if task is Task.RGB else self.depth_proj
        return proj(feats) + temb_tok[:, None, :]

    def forward(self, batch: TokenBatch) -> DenoiserOutput:
        self._check(batch)
        cfg = self.config
        flops: dict | None = {} if self.count_flops else None
        dtype = self._dtype()

        temb = self.time_mlp(sinusoidal_embedding(batch.t, cfg.time_dim).to(dtype))
        b = batch.scene.shape[0]
        latents = self.latents[None].expand(b, -1, -1) + self.time_to_latent(temb)[:, None, :]
        scene = self.scene_proj(batch.scene.to(dtype))
        temb_tok = self.time_to_token(temb)

        groups: list[tuple[Task, int]] = []
        pred_parts = []
        if batch.rgb_rays is not None:
            pred_parts.append(self._project_pred(batch.rgb_rays.to(dtype), batch.rgb_state.to(dtype), Task.RGB, temb_tok))
            groups.append((Task.RGB, pred_parts[-1].shape[1]))
        if batch.depth_rays is not None:
            pred_parts.append(
                self._project_pred(batch.depth_rays.to(dtype), batch.depth_state.to(dtype), Task.DEPTH, temb_tok)
            )
            groups.append((Task.DEPTH, pred_parts[-1].shape[1]))
        pred = torch.cat(pred_parts, dim=1)

        for block in self.blocks:
            latents, pred = block(latents, scene, pred, flops)

        rgb_out = None
        depth_out = None
        offset = 0
        for task, m in groups:
            chunk = pred[:, offset:offset + m]
            offset += m
            if task is Task.RGB:
                rgb_out = self.rgb_head(self.rgb_head_norm(chunk))
            else:
                depth_out = self.depth_head(self.depth_head_norm(chunk))
        if self.count_flops:
            self.last_flops = flops
        return DenoiserOutput(rgb=rgb_out, depth=depth_out)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def duplicate_latents(model: Denoiser) -> Denoiser:
    """New model with the latent rows duplicated ([Z; Z]); all other weights shared.

    Softmax attention is invariant under duplicating keys/values and each
    latent row computes the same read, so outputs are preserved exactly up
    to floating-point reassociation.
    """
    cfg = replace(model.config, num_latents=model.config.num_latents * 2)
    new = Denoiser(cfg)
    new.to(model.latents.dtype)
    state = {k: v.clone() for k, v in model.state_dict().items()}
    state["latents"] = torch.cat([state["latents"], state["latents"]], dim=0)
    new.load_state_dict(state)
    return new
