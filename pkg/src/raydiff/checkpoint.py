"""Versioned binary checkpoints.

Layout::

    b"RDCK" | u32 version | u64 header_len | header JSON | tensor blob

The header carries the resolved run configuration, the step counter, an
index of every tensor (section, name, shape, dtype, byte offset), optimizer
scalars, and a CRC32 of the blob. Tensors are stored as raw little-endian
arrays, so a save/load round trip is bit-exact and resuming training is
bit-equivalent to not having stopped.

Sections: "model" (state dict), "ema" (shadow parameters), and optionally
"opt_exp_avg" / "opt_exp_avg_sq" (optimizer moments keyed by parameter
name). A checkpoint without optimizer sections restores weights only —
that is how expanded models ship with fresh optimizer state.

Any structural problem (bad magic, unknown version, CRC mismatch, missing
section) raises :class:`CheckpointError`.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

__all__ = ["save_checkpoint", "load_checkpoint", "Checkpoint", "restore_optimizer"]

_MAGIC = b"RDCK"
_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}
_NUMPY_DTYPES = {"<f4": np.float32, "<f8": np.float64}


@dataclass
class Checkpoint:
    config: dict
    step: int
    model_state: dict[str, torch.Tensor]
    ema_state: dict[str, torch.Tensor] | None
    opt_exp_avg: dict[str, torch.Tensor] | None
    opt_exp_avg_sq: dict[str, torch.Tensor] | None
    opt_steps: dict[str, int] | None


def _tensor_bytes(tensor: torch.Tensor) -> tuple[bytes, str]:
    t = tensor.detach().cpu().contiguous()
    code = _DTYPES.get(t.dtype)
    if code is None:
        raise CheckpointError(f"unsupported tensor dtype {t.dtype}")
    return t.numpy().astype(code, copy=False).tobytes(), code


def save_checkpoint(
    path,
    *,
    model: torch.nn.Module,
    config: dict,
    step: int,
    ema=None,
    optimizer: torch.optim.Optimizer | None = None,
) -> None:
    sections: list[tuple[str, str, torch.Tensor]] = []
    for name, tensor in model.state_dict().items():
        sections.append(("model", name, tensor))
    if ema is not None:
        for name, tensor in ema.state_dict()["shadow"].items():
            sections.append(("ema", name, tensor))

    opt_steps: dict[str, int] = {}
    if optimizer is not None:
        names = [n for n, _ in model.named_parameters()]
        state = optimizer.state_dict()["state"]
        for idx, entry in state.items():
            name = names[idx]
            sections.append(("opt_exp_avg", name, entry["exp_avg"]))
            sections.append(("opt_exp_avg_sq", name, entry["exp_avg_sq"]))
            opt_steps[name] = int(entry["step"].item() if torch.is_tensor(entry["step"]) else entry["step"])

    blob_parts: list[bytes] = []
    index: list[dict] = []
    offset = 0
    for section, name, tensor in sections:
        raw, code = _tensor_bytes(tensor)
        index.append(
            {
                "section": section,
                "name": name,
                "shape": list(tensor.shape),
                "dtype": code,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blob_parts.append(raw)
        offset += len(raw)
    blob = b"".join(blob_parts)

    header = {
        "config": config,
        "step": int(step),
        "tensors": index,
        "opt_steps": opt_steps if optimizer is not None else None,
        "has_ema": ema is not None,
        "has_optimizer": optimizer is not None,
        "blob_crc32": zlib.crc32(blob),
    }
    header_blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(_MAGIC, _VERSION, len(header_blob)))
        fh.write(header_blob)
        fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            prefix = fh.read(_PREFIX.size)
            if len(prefix) < _PREFIX.size:
                raise CheckpointError(f"{path}: file too short for a checkpoint")
            magic, version, header_len = _PREFIX.unpack(prefix)
            if magic != _MAGIC:
                raise CheckpointError(f"{path}: bad magic {magic!r}")
            if version != _VERSION:
                raise CheckpointError(f"{path}: unsupported version {version}")
            header_blob = fh.read(header_len)
            if len(header_blob) < header_len:
                raise CheckpointError(f"{path}: truncated header")
            try:
                header = json.loads(header_blob.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc

    if zlib.crc32(blob) != header.get("blob_crc32"):
        raise CheckpointError(f"{path}: tensor blob CRC mismatch")

    groups: dict[str, dict[str, torch.Tensor]] = {"model": {}, "ema": {}, "opt_exp_avg": {}, "opt_exp_avg_sq": {}}
    for entry in header["tensors"]:
        raw = blob[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {entry['section']}/{entry['name']}")
        arr = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
        tensor = torch.from_numpy(arr.astype(_NUMPY_DTYPES[entry["dtype"]], copy=False))
        groups[entry["section"]][entry["name"]] = tensor

    has_opt = bool(header.get("has_optimizer"))
    return Checkpoint(
        config=header["config"],
        step=int(header["step"]),
        model_state=groups["model"],
        ema_state=groups["ema"] if header.get("has_ema") else None,
        opt_exp_avg=groups["opt_exp_avg"] if has_opt else None,
        opt_exp_avg_sq=groups["opt_exp_avg_sq"] if has_opt else None,
        opt_steps={k: int(v) for k, v in header["opt_steps"].items()} if has_opt else None,
    )


def restore_optimizer(optimizer: torch.optim.Optimizer, model: torch.nn.Module, ckpt: Checkpoint) -> None:
    """Load saved moments into a freshly constructed optimizer."""
    if ckpt.opt_exp_avg is None:
        raise CheckpointError("checkpoint holds no optimizer state")
    names = [n for n, _ in model.named_parameters()]
    lookup = {name: idx for idx, name in enumerate(names)}
    state: dict[int, dict] = {}
    for name, exp_avg in ckpt.opt_exp_avg.items():
        if name not in lookup:
            raise CheckpointError(f"optimizer state refers to unknown parameter {name!r}")
        state[lookup[name]] = {
            "step": torch.tensor(float(ckpt.opt_steps[name])),
            "exp_avg": exp_avg.clone(),
            "exp_avg_sq": ckpt.opt_exp_avg_sq[name].clone(),
        }
    base = optimizer.state_dict()
    optimizer.load_state_dict({"state": state, "param_groups": base["param_groups"]})
