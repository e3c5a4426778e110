"""On-disk dataset layout and the MMT1 tensor container.

Container: magic ``MMT1`` | u8 dtype code | u8 rank | u32 LE per dim | row-major payload.
Dataset directory: ``manifest.json``, ``meta.json`` and ``tensors/<id>.{video,skeleton}.mmt``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .synth import SPLITS, NUM_LABELS, ActivityArchetype, Dataset, SplitManifest, SynthConfig
from ..skeleton import star_adjacency

MAGIC = b"MMT1"
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
CODE_OF = {np.dtype(v).newbyteorder("="): k for k, v in DTYPE_CODES.items()}
MANIFEST_KEYS = ("id", "archetype", "split", "video_file", "skeleton_file", "label")


class ContainerFormatError(ValueError):
    pass


class TruncatedPayloadError(ValueError):
    pass


class ManifestSchemaError(ValueError):
    pass


class ShapeMismatchError(ValueError):
    pass


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = CODE_OF.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("rank exceeds 255")
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0, source: str = "<buffer>") -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; returns the array and the offset past it."""
    if buf[offset:offset + 4] != MAGIC:
        raise ContainerFormatError(f"{source}: bad magic {bytes(buf[offset:offset + 4])!r} at byte {offset}")
    if len(buf) < offset + 6:
        raise TruncatedPayloadError(f"{source}: header truncated")
    code, rank = struct.unpack_from("<BB", buf, offset + 4)
    if code not in DTYPE_CODES:
        raise ContainerFormatError(f"{source}: unknown dtype code {code}")
    pos = offset + 6
    if len(buf) < pos + 4 * rank:
        raise TruncatedPayloadError(f"{source}: shape header truncated")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dt = DTYPE_CODES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) < pos + nbytes:
        raise TruncatedPayloadError(f"{source}: payload has {len(buf) - pos} bytes, expected {nbytes}")
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape)
    return arr.astype(dt.newbyteorder("="), copy=True), pos + nbytes


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf, 0, str(path))
    if end != len(buf):
        raise ContainerFormatError(f"{path}: {len(buf) - end} trailing bytes")
    return arr


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    tags = ds.split_tags()
    entries = []
    for i, sid in enumerate(ds.ids):
        vf, sf = f"tensors/{sid}.video.mmt", f"tensors/{sid}.skeleton.mmt"
        write_tensor(out / vf, ds.video[i])
        write_tensor(out / sf, ds.skeleton[i])
        entries.append({"id": sid, "archetype": int(ds.archetype_of[i]), "split": tags[i],
                        "video_file": vf, "skeleton_file": sf, "label": [int(v) for v in ds.labels[i]]})
    _dump_json(out / "manifest.json", entries)
    meta = {
        "config": ds.config.to_dict(),
        "archetypes": [a.to_dict() for a in ds.archetypes],
        "known_archetypes": ds.manifest.known_archetypes,
        "new_archetypes": ds.manifest.new_archetypes,
    }
    _dump_json(out / "meta.json", meta)
    return out


def _validate_entry(e, k: int) -> None:
    if not isinstance(e, dict) or set(e) != set(MANIFEST_KEYS):
        raise ManifestSchemaError(f"manifest entry {k} must have exactly the keys {MANIFEST_KEYS}")
    lab = e["label"]
    if not isinstance(lab, list) or len(lab) != NUM_LABELS:
        raise ManifestSchemaError(f"manifest entry {e.get('id')!r}: label must list {NUM_LABELS} values")
    if any(v not in (0, 1) or isinstance(v, bool) for v in lab):
        raise ManifestSchemaError(f"manifest entry {e['id']!r}: label values must be 0 or 1")
    if e["split"] not in SPLITS:
        raise ManifestSchemaError(f"manifest entry {e['id']!r}: unknown split {e['split']!r}")


def read_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    try:
        entries = json.loads((root / "manifest.json").read_text())
        meta = json.loads((root / "meta.json").read_text())
    except json.JSONDecodeError as exc:
        raise ManifestSchemaError(f"{root}: invalid JSON ({exc})") from exc
    if not isinstance(entries, list) or not entries:
        raise ManifestSchemaError(f"{root / 'manifest.json'}: expected a non-empty JSON array")
    for k, e in enumerate(entries):
        _validate_entry(e, k)
    cfg = SynthConfig(**meta["config"])
    v_shape = (cfg.frames, cfg.height, cfg.width, 1)
    s_shape = (cfg.frames, cfg.joints, 2)
    videos, skels = [], []
    for e in entries:
        v = read_tensor(root / e["video_file"])
        s = read_tensor(root / e["skeleton_file"])
        if v.shape != v_shape or s.shape != s_shape:
            raise ShapeMismatchError(
                f"sample {e['id']!r}: tensors {v.shape}/{s.shape} disagree with metadata {v_shape}/{s_shape}"
            )
        videos.append(v)
        skels.append(s)
    manifest = SplitManifest(known_archetypes=list(meta["known_archetypes"]),
                             new_archetypes=list(meta["new_archetypes"]))
    for e in entries:
        getattr(manifest, e["split"]).append(e["id"])
    for name in SPLITS:
        getattr(manifest, name).sort()
    return Dataset(
        cfg, [ActivityArchetype.from_dict(a) for a in meta["archetypes"]], manifest,
        [e["id"] for e in entries], np.array([e["archetype"] for e in entries]),
        np.stack(videos), np.stack(skels), np.array([e["label"] for e in entries], dtype=np.int64),
        star_adjacency(cfg.joints),
    )
