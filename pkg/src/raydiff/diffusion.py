"""Diffusion process: sigmoid noise schedule, forward noising, DDIM sampling,
EMA tracking, and test-time ensembling.

The forward process is x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps with the
cumulative signal level abar given by a normalized sigmoid in t/T:

    raw(t)  = sigmoid(-(a + (t/T) (b - a))),   a = -3, b = 3
    abar(t) = (raw(t) - raw(T)) / (raw(0) - raw(T))

so abar(0) = 1 and abar(T) = 0 before flooring. The terminal value is then
floored at `alpha_floor` (1e-5): the epsilon-parameterized x0 estimate
divides by sqrt(abar_t), and an exact zero would make the first sampling
step 0/0. The floor only binds at t = T.

The model predicts the noise eps. DDIM updates are deterministic (eta = 0):
the x0 estimate is clipped to [-1, 1] (the codec range), eps is re-derived
from the clipped estimate, and the state steps to the next signal level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError

__all__ = [
    "NoiseSchedule",
    "q_sample",
    "ddim_steps",
    "ddim_sample",
    "EmaTracker",
    "ensemble_median",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal levels abar_t for t = 0..T (length T + 1)."""

    alpha_bar: np.ndarray
    num_steps: int

    def __post_init__(self) -> None:
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.num_steps + 1,):
            raise ConfigError(f"alpha_bar must have length T + 1 = {self.num_steps + 1}, got {ab.shape}")
        if ab[0] < 0.999 or ab[-1] > 1e-3:
            raise ConfigError("schedule endpoints out of contract: need abar_0 >= 0.999, abar_T <= 1e-3")
        if not np.all(np.diff(ab) < 0.0):
            raise ConfigError("alpha_bar must be strictly decreasing")
        if ab.min() < 0.0 or ab.max() > 1.0:
            raise ConfigError("alpha_bar must lie in [0, 1]")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    @classmethod
    def sigmoid(cls, num_steps: int = 1000, start: float = -3.0, end: float = 3.0,
                alpha_floor: float = 1e-5) -> "NoiseSchedule":
        if num_steps < 1:
            raise ConfigError(f"num_steps must be >= 1, got {num_steps}")
        t = np.arange(num_steps + 1, dtype=np.float64) / num_steps
        raw = 1.0 / (1.0 + np.exp(start + t * (end - start)))
        ab = (raw - raw[-1]) / (raw[0] - raw[-1])
        ab = np.maximum(ab, alpha_floor)
        ab[0] = 1.0
        return cls(alpha_bar=ab, num_steps=num_steps)

    def signal(self, t: np.ndarray | int) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.num_steps):
            raise ConfigError(f"timestep out of [0, {self.num_steps}]")
        return self.alpha_bar[t]


def q_sample(
    x0: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Forward noising x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    `t` is one integer timestep per batch element; abar broadcasts over the
    trailing token/state dimensions.
    """
    if x0.shape != eps.shape:
        raise ConfigError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} must match")
    if t.ndim != 1 or t.shape[0] != x0.shape[0]:
        raise ConfigError(f"t must be (B,), got {tuple(t.shape)}")
    ab = torch.from_numpy(np.asarray(schedule.signal(t.cpu().numpy()))).to(x0.dtype)
    ab = ab.reshape(-1, *([1] * (x0.ndim - 1)))
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def ddim_steps(num_train_steps: int, num_eval_steps: int) -> list[tuple[int, int]]:
    """Evenly spaced (t_from, t_to) pairs from T down to 0."""
    if not (1 <= num_eval_steps <= num_train_steps):
        raise ConfigError(f"need 1 <= eval steps <= {num_train_steps}, got {num_eval_steps}")
    grid = [int(round(num_train_steps * k / num_eval_steps)) for k in range(num_eval_steps, -1, -1)]
    return [(grid[i], grid[i + 1]) for i in range(num_eval_steps)]


def ddim_sample(
    eps_fn,
    shape: tuple[int, ...],
    schedule: NoiseSchedule,
    num_eval_steps: int,
    rng: np.random.Generator,
    dtype: torch.dtype = torch.float32,
    x0_clip: float = 1.0,
) -> torch.Tensor:
    """Deterministic DDIM sampling from pure noise.

    `eps_fn(x, t)` returns the noise estimate for state `x` at integer
    timestep `t`. The initial state is drawn from `rng`, so results are a
    pure function of (parameters, conditioning, seed).
    """
    x = torch.from_numpy(rng.standard_normal(shape)).to(dtype)
    for t_from, t_to in ddim_steps(schedule.num_steps, num_eval_steps):
        ab_from = float(schedule.alpha_bar[t_from])
        ab_to = float(schedule.alpha_bar[t_to])
        eps = eps_fn(x, t_from)
        x0 = (x - np.sqrt(1.0 - ab_from) * eps) / np.sqrt(ab_from)
        x0 = x0.clamp(-x0_clip, x0_clip)
        if ab_from < 1.0:
            eps = (x - np.sqrt(ab_from) * x0) / np.sqrt(1.0 - ab_from)
        x = np.sqrt(ab_to) * x0 + np.sqrt(1.0 - ab_to) * eps
    return x


class EmaTracker:
    """Exponential moving average of model parameters.

    shadow <- decay * shadow + (1 - decay) * param after every optimizer
    step; shadows converge geometrically at rate (1 - decay). `copy_to`
    loads the shadows into a model for evaluation.
    """

    def __init__(self, model: torch.nn.Module, decay: float = 0.999):
        if not (0.0 <= decay < 1.0):
            raise ConfigError(f"decay must be in [0, 1), got {decay}")
        self.decay = decay
        self.shadow = {name: p.detach().clone() for name, p in model.named_parameters()}

    @torch.no_grad()
    def update(self, model: torch.nn.Module) -> None:
        for name, p in model.named_parameters():
            self.shadow[name].mul_(self.decay).add_(p.detach(), alpha=1.0 - self.decay)

    @torch.no_grad()
    def copy_to(self, model: torch.nn.Module) -> None:
        for name, p in model.named_parameters():
            p.copy_(self.shadow[name])

    def state_dict(self) -> dict:
        return {"decay": self.decay, "shadow": self.shadow}

    def load_state_dict(self, state: dict) -> None:
        self.decay = float(state["decay"])
        self.shadow = {k: v.clone() for k, v in state["shadow"].items()}


def ensemble_median(members: np.ndarray) -> np.ndarray:
    """Per-pixel median over ensemble members, axis 0.

    With an odd member count the median is an order statistic, so it
    commutes with any strictly monotone decoder applied per pixel.
    """
    members = np.asarray(members)
    if members.ndim < 1 or members.shape[0] < 1:
        raise ConfigError("need at least one ensemble member")
    return np.median(members, axis=0)
