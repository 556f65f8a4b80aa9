"""Binary shard storage for generated scenes.

Each shard file is a magic/version header followed by length-prefixed,
CRC-guarded records, one per frame::

    shard  := b"RDSH" | u32 version | record*
    record := u32 payload_len | u32 crc32(payload) | payload

The payload packs a JSON metadata block, the image as lossless PNG, the
optional depth map as raw little-endian float32 (NaN marks invalid pixels),
and the camera as 12 extrinsic + 9 intrinsic float64 values (row-major).
Images are stored 8-bit; frames produced by this package already live on
the 8-bit grid, so write -> read round-trips bit-exactly.

A new shard starts whenever the current one would outgrow the target size
(every shard keeps at least one record). A JSONL manifest indexes every
record by shard, byte offset, and length; its first line carries the format
version.

Corruption handling: a CRC mismatch on a complete record raises
:class:`ShardError` naming the shard and offset. A final record cut short by
truncation is reported as a warning and reading stops at the last complete
record of that shard.
"""

from __future__ import annotations

import io
import json
import struct
import warnings
import zlib
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ShardError
from .geometry import Camera
from .synth import Frame, SceneRecord

__all__ = ["write_shards", "read_shards", "iter_frames", "DATA_MANIFEST_VERSION"]

_MAGIC = b"RDSH"
_SHARD_VERSION = 1
DATA_MANIFEST_VERSION = 1
_FILE_HEADER = struct.Struct("<4sI")
_RECORD_HEADER = struct.Struct("<II")


def _encode_png(image: np.ndarray) -> bytes:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShardError(f"image must be (H, W, 3), got {arr.shape}")
    if np.nanmin(arr) < 0.0 or np.nanmax(arr) > 1.0 or not np.isfinite(arr).all():
        raise ShardError("image values must be finite and within [0, 1]")
    u8 = np.round(arr * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, mode="RGB").save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def _decode_png(blob: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(blob)) as im:
        u8 = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return (u8.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def _pack_frame(scene: SceneRecord, index: int, frame: Frame) -> bytes:
    meta = {
        "scene": scene.scene_id,
        "frame": index,
        "timestep": frame.timestep,
        "metric": scene.metric,
        "dynamic": scene.dynamic,
        "width": frame.camera.width,
        "height": frame.camera.height,
    }
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    png_blob = _encode_png(frame.image)
    parts = [
        struct.pack("<I", len(meta_blob)),
        meta_blob,
        struct.pack("<I", len(png_blob)),
        png_blob,
    ]
    if frame.depth is not None:
        depth = np.asarray(frame.depth, dtype="<f4")
        if depth.shape != (frame.camera.height, frame.camera.width):
            raise ShardError(f"depth shape {depth.shape} does not match camera")
        parts.append(struct.pack("<BII", 1, depth.shape[0], depth.shape[1]))
        parts.append(depth.tobytes())
    else:
        parts.append(struct.pack("<B", 0))
    parts.append(np.ascontiguousarray(frame.camera.T[:3, :], dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(frame.camera.K, dtype="<f8").tobytes())
    return b"".join(parts)


def _unpack_frame(payload: bytes) -> tuple[dict, Frame]:
    view = memoryview(payload)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        chunk = view[pos : pos + n]
        if len(chunk) != n:
            raise ShardError("record payload shorter than declared")
        pos += n
        return chunk

    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    (png_len,) = struct.unpack("<I", take(4))
    image = _decode_png(bytes(take(png_len)))
    (has_depth,) = struct.unpack("<B", take(1))
    depth = None
    if has_depth:
        h, w = struct.unpack("<II", take(8))
        depth = np.frombuffer(take(4 * h * w), dtype="<f4").reshape(h, w).copy()
    ext = np.frombuffer(take(12 * 8), dtype="<f8").reshape(3, 4).copy()
    K = np.frombuffer(take(9 * 8), dtype="<f8").reshape(3, 3).copy()
    T = np.vstack([ext, [0.0, 0.0, 0.0, 1.0]])
    camera = Camera(K=K, T=T, width=int(meta["width"]), height=int(meta["height"]))
    return meta, Frame(image=image, depth=depth, camera=camera, timestep=float(meta["timestep"]))


def write_shards(
    scenes: list[SceneRecord],
    out_dir,
    shard_size: int = 4 * 1024 * 1024,
    prefix: str = "frames",
) -> Path:
    """Write every frame to rolling shards; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_rows: list[dict] = []

    shard_index = -1
    fh = None
    shard_name = ""
    written = 0

    def _open_next():
        nonlocal shard_index, fh, shard_name, written
        if fh is not None:
            fh.close()
        shard_index += 1
        shard_name = f"{prefix}-{shard_index:05d}.shard"
        fh = open(out / shard_name, "wb")
        fh.write(_FILE_HEADER.pack(_MAGIC, _SHARD_VERSION))
        written = _FILE_HEADER.size

    try:
        for scene in scenes:
            for idx, frame in enumerate(scene.frames):
                payload = _pack_frame(scene, idx, frame)
                record = _RECORD_HEADER.pack(len(payload), zlib.crc32(payload)) + payload
                if fh is None or (written > _FILE_HEADER.size and written + len(record) > shard_size):
                    _open_next()
                offset = written
                fh.write(record)
                written += len(record)
                manifest_rows.append(
                    {
                        "shard": shard_name,
                        "offset": offset,
                        "length": len(record),
                        "scene": scene.scene_id,
                        "frame": idx,
                    }
                )
    finally:
        if fh is not None:
            fh.close()

    manifest_path = out / f"{prefix}-manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as mh:
        mh.write(
            json.dumps(
                {
                    "format_version": DATA_MANIFEST_VERSION,
                    "kind": "frames",
                    "count": len(manifest_rows),
                    "shards": shard_index + 1,
                }
            )
            + "\n"
        )
        for row in manifest_rows:
            mh.write(json.dumps(row) + "\n")
    return manifest_path


def iter_frames(manifest_path):
    """Yield (meta, Frame) for every record listed in the manifest.

    CRC failures raise; a truncated final record warns and ends that shard.
    """
    manifest_path = Path(manifest_path)
    with open(manifest_path, encoding="utf-8") as mh:
        header = json.loads(mh.readline())
        if header.get("kind") != "frames" or header.get("format_version") != DATA_MANIFEST_VERSION:
            raise ShardError(f"not a frame manifest (header {header})")
        rows = [json.loads(line) for line in mh if line.strip()]

    by_shard: dict[str, list[dict]] = {}
    for row in rows:
        by_shard.setdefault(row["shard"], []).append(row)

    for shard_name, shard_rows in by_shard.items():
        path = manifest_path.parent / shard_name
        with open(path, "rb") as fh:
            head = fh.read(_FILE_HEADER.size)
            if len(head) < _FILE_HEADER.size or head[:4] != _MAGIC:
                raise ShardError(f"{shard_name}: bad shard header")
            (_, version) = _FILE_HEADER.unpack(head)
            if version != _SHARD_VERSION:
                raise ShardError(f"{shard_name}: unsupported shard version {version}")
            blob = fh.read()
        base = _FILE_HEADER.size
        for row in sorted(shard_rows, key=lambda r: r["offset"]):
            start = row["offset"] - base
            header_bytes = blob[start : start + _RECORD_HEADER.size]
            if len(header_bytes) < _RECORD_HEADER.size:
                warnings.warn(f"{shard_name}: truncated at offset {row['offset']}; stopping shard", RuntimeWarning)
                break
            payload_len, crc = _RECORD_HEADER.unpack(header_bytes)
            payload = blob[start + _RECORD_HEADER.size : start + _RECORD_HEADER.size + payload_len]
            if len(payload) < payload_len:
                warnings.warn(f"{shard_name}: truncated at offset {row['offset']}; stopping shard", RuntimeWarning)
                break
            if zlib.crc32(payload) != crc:
                raise ShardError(f"{shard_name}: CRC mismatch at offset {row['offset']}")
            yield _unpack_frame(bytes(payload))


def read_shards(manifest_path) -> list[SceneRecord]:
    """Read the full corpus back, grouped into scenes ordered by frame index."""
    scenes: dict[str, dict] = {}
    for meta, frame in iter_frames(manifest_path):
        entry = scenes.setdefault(
            meta["scene"], {"metric": meta["metric"], "dynamic": meta["dynamic"], "frames": {}}
        )
        entry["frames"][int(meta["frame"])] = frame
    records = []
    for scene_id, entry in scenes.items():
        order = sorted(entry["frames"])
        records.append(
            SceneRecord(
                scene_id=scene_id,
                frames=[entry["frames"][i] for i in order],
                metric=entry["metric"],
                dynamic=entry["dynamic"],
            )
        )
    return records
