"""Command-line interface.

Subcommands cover the full pipeline:

* ``gen``     — render synthetic scenes to shards + manifest
* ``curate``  — select conditioning groups into a pair manifest
* ``train``   — optimize the denoiser (supports bit-exact resume)
* ``expand``  — double the latent count, preserving the model's function
* ``sample``  — synthesize novel views from a checkpoint
* ``eval``    — batch metrics over held-out targets

Every command echoes its fully resolved configuration next to its outputs.
Diagnostics go to stderr; data only to files. Exit codes: 0 success,
2 invalid input or configuration, 3 corrupt or unreadable checkpoint.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .codec import Task
from .config import RunConfig, config_from_dict, config_to_dict, load_config, profile, save_config
from .curation import curate_scene, read_pair_manifest, write_pair_manifest
from .denoiser import Denoiser, TokenBatch, duplicate_latents
from .diffusion import NoiseSchedule
from .errors import CheckpointError, RaydiffError
from .geometry import write_ply
from .inference import (
    ConditioningView,
    GenerationRequest,
    aggregate_metrics,
    compute_metrics,
    synthesize,
    synthesize_incremental,
)
from .shards import read_shards, write_shards
from .synth import generate_scene
from .training import Trainer

log = logging.getLogger("raydiff")

_TASK_CHOICES = {
    "both": (Task.RGB, Task.DEPTH),
    "rgb": (Task.RGB,),
    "depth": (Task.DEPTH,),
}


def _resolve_config(args) -> RunConfig:
    base = profile(args.profile)
    if getattr(args, "config", None):
        return load_config(args.config, base=base)
    return base


def _schedule(config: RunConfig) -> NoiseSchedule:
    s = config.schedule
    return NoiseSchedule.sigmoid(s.num_steps, start=s.start, end=s.end, alpha_floor=s.alpha_floor)


def _load_model(path) -> tuple[Denoiser, RunConfig, object]:
    ckpt = load_checkpoint(path)
    config = config_from_dict(ckpt.config)
    model = Denoiser(config.model)
    model.load_state_dict(ckpt.model_state)
    return model, config, ckpt


def _eval_weights(model: Denoiser, ckpt, use_ema: bool) -> None:
    if use_ema and ckpt.ema_state is not None:
        with torch.no_grad():
            for name, param in model.named_parameters():
                param.copy_(ckpt.ema_state[name])
        log.info("using EMA weights")


def _parse_indices(spec: str) -> list[int]:
    try:
        return [int(part) for part in spec.split(",") if part.strip() != ""]
    except ValueError:
        raise RaydiffError(f"expected comma-separated integers, got {spec!r}") from None


def _save_image_png(image: np.ndarray, path) -> None:
    from PIL import Image

    u8 = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def _save_depth_preview(depth: np.ndarray, path) -> None:
    """16-bit PNG normalized over the map's own range; for inspection only."""
    from PIL import Image

    finite = np.isfinite(depth)
    lo = float(depth[finite].min()) if finite.any() else 0.0
    hi = float(depth[finite].max()) if finite.any() else 1.0
    span = hi - lo if hi > lo else 1.0
    u16 = np.zeros(depth.shape, dtype=np.uint16)
    u16[finite] = np.round((depth[finite] - lo) / span * 65535.0).astype(np.uint16)
    Image.fromarray(u16).save(path, format="PNG")


def cmd_gen(args) -> int:
    config = _resolve_config(args)
    data = config.data
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.count is not None:
        overrides["count"] = args.count
    if args.frames is not None:
        overrides["frames"] = args.frames
    seed = overrides.get("seed", data.seed)
    count = overrides.get("count", data.num_scenes)
    frames = overrides.get("frames", data.frames_per_scene)
    if count < 0 or frames < 1:
        raise RaydiffError(f"need count >= 0 and frames >= 1, got {count}, {frames}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = []
    for i in range(count):
        layout = "orbit" if i % 2 == 0 else "dolly"
        scene = generate_scene(
            seed=seed + i, num_frames=frames, width=data.width, height=data.height, layout=layout
        )
        scenes.append(scene)
        log.info("rendered %s (%d frames)", scene.scene_id, frames)
    manifest = write_shards(scenes, out, shard_size=data.shard_size)
    resolved = config_from_dict(
        {"data": {"seed": seed, "num_scenes": count, "frames_per_scene": frames}}, base=config
    )
    save_config(resolved, out / "config.json")
    log.info("wrote %d scenes to %s", count, manifest)
    print(manifest)
    return 0


def cmd_curate(args) -> int:
    config = _resolve_config(args)
    scenes = read_shards(args.manifest)
    samples = []
    for scene in scenes:
        found = curate_scene(scene, config.curation, seed=args.seed)
        log.info("%s: %d samples", scene.scene_id, len(found))
        samples.extend(found)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pair_manifest(samples, out)
    save_config(config, out.parent / "curate-config.json")
    both = sum(1 for s in samples if "depth" in s.tasks)
    log.info("curated %d samples (%d with depth) from %d scenes", len(samples), both, len(scenes))
    print(out)
    return 0


def _scene_dict(scenes) -> dict:
    return {s.scene_id: s for s in scenes}


def cmd_train(args) -> int:
    if args.resume:
        _, config, ckpt = _load_model(args.resume)
    else:
        config, ckpt = _resolve_config(args), None
    overrides: dict = {"train": {}}
    if args.steps is not None:
        overrides["train"]["steps"] = args.steps
    if args.lr is not None:
        overrides["train"]["lr"] = args.lr
    if args.seed is not None:
        overrides["train"]["seed"] = args.seed
    config = config_from_dict(overrides, base=config)

    scenes = _scene_dict(read_shards(args.manifest))
    samples = read_pair_manifest(args.pairs)
    schedule = _schedule(config)

    torch.manual_seed(config.train.seed)
    model = Denoiser(config.model)
    trainer = Trainer(model, schedule, config, scenes, samples)
    if ckpt is not None:
        trainer.restore(ckpt)
        log.info("resumed from %s at step %d", args.resume, trainer.step)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.json")
    ckpt_path = out / "checkpoint.bin"

    def on_checkpoint(tr: Trainer) -> None:
        save_checkpoint(
            ckpt_path,
            model=tr.model,
            config=config_to_dict(config),
            step=tr.step,
            ema=tr.ema,
            optimizer=tr.optimizer,
        )
        log.info("checkpoint at step %d -> %s", tr.step, ckpt_path)

    with open(out / "log.jsonl", "a", encoding="utf-8") as log_stream:
        row = trainer.run(config.train.steps, log_stream=log_stream, on_checkpoint=on_checkpoint)
    if row:
        log.info("finished at step %d, loss %.4f", row["step"], row["loss"])
    print(ckpt_path)
    return 0


def cmd_expand(args) -> int:
    model, config, ckpt = _load_model(args.checkpoint)
    expanded = duplicate_latents(model)

    # probe that duplication preserved the function before shipping it
    cfg = config.model
    gen = torch.Generator().manual_seed(0)
    probe = TokenBatch(
        scene=torch.randn(2, 6, cfg.scene_token_dim, generator=gen),
        t=torch.tensor([5, 900]),
        rgb_rays=torch.randn(2, 4, cfg.ray_dim, generator=gen),
        rgb_state=torch.randn(2, 4, 3, generator=gen),
        depth_rays=torch.randn(2, 4, cfg.ray_dim, generator=gen),
        depth_state=torch.randn(2, 4, 1, generator=gen),
    )
    model.eval()
    expanded.eval()
    with torch.no_grad():
        before, after = model(probe), expanded(probe)
    deviation = max(
        float((before.rgb - after.rgb).abs().max()),
        float((before.depth - after.depth).abs().max()),
    )
    log.info("latents %d -> %d, output deviation %.3e", cfg.num_latents, 2 * cfg.num_latents, deviation)
    if deviation > args.tolerance:
        raise RaydiffError(f"expansion changed outputs by {deviation:.3e} > {args.tolerance:.0e}")

    new_config = config_from_dict({"model": {"num_latents": 2 * cfg.num_latents}}, base=config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    # fresh run state: no optimizer moments, EMA restarts from the new weights
    save_checkpoint(out, model=expanded, config=config_to_dict(new_config), step=0)
    print(out)
    return 0


def _select_frames(scene, spec: str | None, default: list[int]) -> list[int]:
    ids = _parse_indices(spec) if spec else default
    for i in ids:
        if not 0 <= i < len(scene.frames):
            raise RaydiffError(f"frame index {i} out of range for {scene.scene_id} ({len(scene.frames)} frames)")
    return ids


def _pick_scene(scenes, name: str | None):
    if name is None:
        return scenes[0]
    for scene in scenes:
        if scene.scene_id == name:
            return scene
    raise RaydiffError(f"scene {name!r} not found; available: {[s.scene_id for s in scenes]}")


def _write_target_outputs(out: Path, stem: str, result) -> None:
    if result.image is not None:
        _save_image_png(result.image, out / f"{stem}.png")
    if result.depth is not None:
        np.save(out / f"{stem}-depth.npy", result.depth.astype(np.float32))
        _save_depth_preview(result.depth, out / f"{stem}-depth.png")
    if result.cloud is not None:
        write_ply(result.cloud, str(out / f"{stem}.ply"))


def _artifact_view(result) -> tuple[np.ndarray | None, np.ndarray | None]:
    """The result exactly as the saved files represent it: color snapped to
    the PNG's 8-bit grid, depth cast to the .npy map's float32. Reported
    metrics therefore match a recomputation from the artifacts bit-for-bit."""
    image = None
    if result.image is not None:
        image = np.round(np.clip(result.image, 0.0, 1.0) * 255.0) / 255.0
    depth = None if result.depth is None else np.asarray(result.depth, dtype=np.float32)
    return image, depth


def cmd_sample(args) -> int:
    model, config, ckpt = _load_model(args.checkpoint)
    _eval_weights(model, ckpt, use_ema=not args.no_ema)
    scenes = read_shards(args.manifest)
    scene = _pick_scene(scenes, args.scene)
    cond_ids = _select_frames(scene, args.conditioning, [0, 1, 2])
    target_ids = _select_frames(scene, args.targets, [len(scene.frames) // 2])
    overlap = set(cond_ids) & set(target_ids)
    if overlap:
        log.warning("targets %s also appear in the conditioning set", sorted(overlap))

    request = GenerationRequest(
        conditioning=[ConditioningView(scene.frames[i].image, scene.frames[i].camera) for i in cond_ids],
        targets=[scene.frames[i].camera for i in target_ids],
        tasks=_TASK_CHOICES[args.task],
        ensemble=args.ensemble,
        eval_steps=args.eval_steps,
        seed=args.seed,
    )
    runner = synthesize_incremental if args.incremental else synthesize
    schedule = _schedule(config)
    results = runner(model, schedule, request, config)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.json")
    reports = []
    rows = []
    for tid, result in zip(target_ids, results):
        stem = f"target-{tid:04d}"
        _write_target_outputs(out, stem, result)
        gt = scene.frames[tid]
        pred_image, pred_depth = _artifact_view(result)
        report = compute_metrics(pred_image, gt.image, pred_depth, gt.depth)
        reports.append(report)
        rows.append({"target": tid, **result.info, "scale": result.scale, "metrics": report.to_dict()})
        log.info("target %d: views=%d psnr=%s", tid, result.info["views"], report.psnr)
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump({"targets": rows, "aggregate": aggregate_metrics(reports)}, fh, indent=2)
        fh.write("\n")
    print(out / "metrics.json")
    return 0


def cmd_eval(args) -> int:
    model, config, ckpt = _load_model(args.checkpoint)
    _eval_weights(model, ckpt, use_ema=not args.no_ema)
    scenes = read_shards(args.manifest)
    if args.scene is not None:
        scenes = [_pick_scene(scenes, args.scene)]
    schedule = _schedule(config)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.json")
    all_reports = []
    per_scene = {}
    for scene in scenes:
        centers = np.stack([f.camera.center for f in scene.frames])
        targets = list(range(len(scene.frames)))[:: args.every]
        reports = []
        for tid in targets:
            dists = np.linalg.norm(centers - centers[tid], axis=1)
            dists[tid] = np.inf
            cond_ids = list(np.argsort(dists)[: args.views])
            request = GenerationRequest(
                conditioning=[ConditioningView(scene.frames[i].image, scene.frames[i].camera) for i in cond_ids],
                targets=[scene.frames[tid].camera],
                tasks=_TASK_CHOICES[args.task],
                ensemble=args.ensemble,
                eval_steps=args.eval_steps,
                seed=args.seed,
            )
            (result,) = synthesize(model, schedule, request, config)
            gt = scene.frames[tid]
            pred_image, pred_depth = _artifact_view(result)
            report = compute_metrics(pred_image, gt.image, pred_depth, gt.depth)
            reports.append(report)
            all_reports.append(report)
            if args.save_outputs:
                _write_target_outputs(out, f"{scene.scene_id}-target-{tid:04d}", result)
        per_scene[scene.scene_id] = aggregate_metrics(reports)
        log.info("%s: %s", scene.scene_id, per_scene[scene.scene_id])
    summary = {"scenes": per_scene, "aggregate": aggregate_metrics(all_reports)}
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(out / "metrics.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raydiff", description="multi-view diffusion pipeline")
    parser.add_argument("--threads", type=int, default=None, help="torch CPU thread count")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common_config(p):
        p.add_argument("--profile", default="toy", help="configuration profile (toy, full)")
        p.add_argument("--config", default=None, help="JSON config file overriding the profile")

    p = sub.add_parser("gen", help="render synthetic scenes into shards")
    common_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--count", type=int, default=None, help="number of scenes")
    p.add_argument("--frames", type=int, default=None, help="frames per scene")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("curate", help="select conditioning groups")
    common_config(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="pair manifest path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("train", help="train the denoiser")
    common_config(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("expand", help="double the latent count of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=cmd_expand)

    def common_sampling(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--task", choices=sorted(_TASK_CHOICES), default="both")
        p.add_argument("--ensemble", type=int, default=5)
        p.add_argument("--eval-steps", type=int, default=10)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--no-ema", action="store_true", help="use raw weights instead of EMA")

    p = sub.add_parser("sample", help="synthesize chosen targets of one scene")
    common_sampling(p)
    p.add_argument("--scene", default=None, help="scene id (default: first)")
    p.add_argument("--conditioning", default=None, help="comma-separated frame indices")
    p.add_argument("--targets", default=None, help="comma-separated frame indices")
    p.add_argument("--incremental", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="metrics over held-out targets")
    common_sampling(p)
    p.add_argument("--scene", default=None, help="restrict to one scene id")
    p.add_argument("--every", type=int, default=4, help="evaluate every Nth frame")
    p.add_argument("--views", type=int, default=3, help="nearest conditioning views per target")
    p.add_argument("--save-outputs", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(message)s",
    )
    if args.threads is not None:
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except CheckpointError as exc:
        log.error("checkpoint error: %s", exc)
        return 3
    except (RaydiffError, OSError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        return 2



if __name__ == "__main__":
    raise SystemExit(main())
