"""Run configuration: one nested dataclass tree, JSON in, JSON out.

`RunConfig` gathers every knob of the pipeline. Profiles provide complete
defaults ("toy" trains on CPU in minutes; "full" is the reference scale).
A JSON config file may override any subset; unknown keys are rejected so
typos fail loudly. CLI flags override file values last. Commands echo the
fully resolved configuration next to their outputs so runs are auditable.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field

from .codec import DepthRange, RayEncoding
from .curation import CurationConfig
from .denoiser import DenoiserConfig
from .errors import ConfigError

__all__ = [
    "ScheduleSettings",
    "TrainSettings",
    "SampleSettings",
    "DataSettings",
    "RunConfig",
    "profile",
    "PROFILES",
    "config_from_dict",
    "config_to_dict",
    "load_config",
    "save_config",
]


@dataclass(frozen=True)
class ScheduleSettings:
    num_steps: int = 1000
    start: float = -3.0
    end: float = 3.0
    alpha_floor: float = 1e-5


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 45_000
    batch_size: int = 8
    lr: float = 3e-4
    warmup_steps: int = 500
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.99
    ema_decay: float = 0.999
    scene_tokens_per_view: int = 128
    pred_tokens: int = 512
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 1000


@dataclass(frozen=True)
class SampleSettings:
    ensemble: int = 5
    eval_steps: int = 10
    seed: int = 0


@dataclass(frozen=True)
class DataSettings:
    width: int = 32
    height: int = 32
    frames_per_scene: int = 24
    num_scenes: int = 8
    seed: int = 0
    shard_size: int = 4 * 1024 * 1024


@dataclass(frozen=True)
class RunConfig:
    profile: str = "toy"
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: ScheduleSettings = field(default_factory=ScheduleSettings)
    rays: RayEncoding = field(default_factory=RayEncoding)
    depth_range: DepthRange = field(default_factory=DepthRange)
    train: TrainSettings = field(default_factory=TrainSettings)
    sample: SampleSettings = field(default_factory=SampleSettings)
    data: DataSettings = field(default_factory=DataSettings)
    curation: CurationConfig = field(default_factory=CurationConfig)


_TOY = RunConfig(
    profile="toy",
    model=DenoiserConfig(
        num_blocks=2,
        block_depth=6,
        num_heads=2,
        num_latents=32,
        latent_dim=64,
        token_dim=128,
        image_embed_dim=128,
        task_dim=16,
        ray_dim=RayEncoding().dim,
        time_dim=64,
        ff_mult=4,
        conv_channels=(32, 64),
    ),
)

_FULL = RunConfig(
    profile="full",
    model=DenoiserConfig(),  # reference scale
    train=TrainSettings(
        steps=300_000,
        batch_size=512,
        lr=1e-4,
        warmup_steps=10_000,
        scene_tokens_per_view=1024,
        pred_tokens=4096,
    ),
    data=DataSettings(width=256, height=256, frames_per_scene=48, num_scenes=64),
)

PROFILES = {"toy": _TOY, "full": _FULL}


def profile(name: str) -> RunConfig:
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


def config_to_dict(config: RunConfig) -> dict:
    return dataclasses.asdict(config)


def _from_dict(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        hint = hints[f.name]
        key = f"{path}.{f.name}" if path else f.name
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _from_dict(hint, value, key)
        elif hint is float:
            kwargs[f.name] = float(value)
        elif hint is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ConfigError(f"{key}: expected an integer, got {value!r}")
            kwargs[f.name] = int(value)
        elif typing.get_origin(hint) is tuple:
            kwargs[f.name] = tuple(value)
        else:
            kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def config_from_dict(data: dict, base: RunConfig | None = None) -> RunConfig:
    """Build a RunConfig from a (possibly partial) dict.

    When `data` names a profile, that profile supplies defaults for every
    field the dict does not set; otherwise `base` (or the toy profile) does.
    """
    if base is None:
        base = profile(data["profile"]) if isinstance(data, dict) and "profile" in data else _TOY
    merged = _merge(config_to_dict(base), data)
    return _from_dict(RunConfig, merged, "")


def _merge(base: dict, override) -> dict:
    if not isinstance(override, dict):
        raise ConfigError(f"expected an object, got {type(override).__name__}")
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data, base=base)


def save_config(config: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")
