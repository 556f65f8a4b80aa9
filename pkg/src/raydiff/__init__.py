"""Ray-conditioned multi-view diffusion for novel view and depth synthesis.

The package covers the full pipeline at desk scale: pinhole camera geometry
and raymaps (`geometry`), scene-scale normalization (`scene_scale`), value
codecs for color, depth, and rays (`codec`), the latent read/write denoiser
(`denoiser`), the diffusion schedule and deterministic sampler (`diffusion`),
procedural scene generation and sharded storage (`synth`, `shards`),
conditioning-pair curation (`curation`), training (`training`), checkpoints
(`checkpoint`), and novel-view synthesis with metrics (`inference`).  The
`raydiff` command line (`cli`) drives the same code end to end.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .codec import (
    DepthRange,
    RayEncoding,
    Task,
    decode_depth,
    decode_rgb,
    encode_depth,
    encode_rays,
    encode_rgb,
)
from .config import RunConfig, config_from_dict, config_to_dict, load_config, profile, save_config
from .curation import CurationConfig, CuratedSample, curate_scene, pair_is_valid, valid_pairs
from .denoiser import Denoiser, DenoiserConfig, TokenBatch, duplicate_latents
from .diffusion import EmaTracker, NoiseSchedule, ddim_sample, ensemble_median, q_sample
from .errors import (
    CheckpointError,
    ConfigError,
    DegenerateSceneScaleError,
    RaydiffError,
    ShardError,
    SupervisionError,
)
from .geometry import (
    Camera,
    PointCloud,
    RayMap,
    compute_raymap,
    project_depth,
    project_depth_grid,
    unproject,
)
from .inference import (
    ConditioningView,
    GenerationRequest,
    MetricsReport,
    TargetResult,
    aggregate_metrics,
    compute_metrics,
    synthesize,
    synthesize_incremental,
)
from .scene_scale import denormalize_depth, normalize_scene
from .shards import read_shards, write_shards
from .synth import Frame, SceneRecord, generate_scene
from .training import Trainer

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "Camera",
    "Checkpoint",
    "CheckpointError",
    "ConditioningView",
    "ConfigError",
    "CuratedSample",
    "CurationConfig",
    "DegenerateSceneScaleError",
    "ShardError",
    "Denoiser",
    "DenoiserConfig",
    "DepthRange",
    "EmaTracker",
    "Frame",
    "GenerationRequest",
    "MetricsReport",
    "NoiseSchedule",
    "PointCloud",
    "RayEncoding",
    "RaydiffError",
    "RayMap",
    "RunConfig",
    "SceneRecord",
    "SupervisionError",
    "TargetResult",
    "Task",
    "TokenBatch",
    "Trainer",
    "aggregate_metrics",
    "compute_metrics",
    "compute_raymap",
    "config_from_dict",
    "config_to_dict",
    "curate_scene",
    "ddim_sample",
    "decode_depth",
    "decode_rgb",
    "denormalize_depth",
    "duplicate_latents",
    "encode_depth",
    "encode_rays",
    "encode_rgb",
    "ensemble_median",
    "generate_scene",
    "load_checkpoint",
    "load_config",
    "normalize_scene",
    "pair_is_valid",
    "profile",
    "project_depth",
    "project_depth_grid",
    "q_sample",
    "read_shards",
    "save_checkpoint",
    "save_config",
    "synthesize",
    "synthesize_incremental",
    "unproject",
    "valid_pairs",
    "write_shards",
]
