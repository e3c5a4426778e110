"""Checkpoint directories: ``state.json`` plus a ``tensors.bin`` of concatenated MMT1 records."""
from __future__ import annotations

import hashlib
import json
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data.io import TruncatedPayloadError, decode_tensor, encode_tensor

FORMAT_VERSION = 1


class CheckpointMismatchError(ValueError):
    """The checkpoint was produced under a different configuration."""


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


@dataclass
class Checkpoint:
    phase: str
    epoch: int
    config: dict
    params: dict[str, np.ndarray]
    optimizer_step: int = 0
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    rng: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    config_hash: str = ""

    def __post_init__(self):
        if not self.config_hash:
            self.config_hash = config_hash(self.config)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write atomically: build in a sibling temp directory, then swap it in."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    names = [("param", n) for n in ckpt.params] + [("optim", n) for n in ckpt.optimizer]
    with open(tmp / "tensors.bin", "wb") as fh:
        for kind, n in names:
            fh.write(encode_tensor((ckpt.params if kind == "param" else ckpt.optimizer)[n]))
    state = {
        "format": FORMAT_VERSION, "phase": ckpt.phase, "epoch": ckpt.epoch,
        "config": ckpt.config, "config_hash": ckpt.config_hash,
        "optimizer_step": ckpt.optimizer_step, "rng": ckpt.rng, "history": ckpt.history,
        "tensors": [f"{kind}:{n}" for kind, n in names],
    }
    (tmp / "state.json").write_text(json.dumps(state, indent=1, sort_keys=True) + "\n")
    if path.exists():
        old = path.with_name(path.name + ".old")
        if old.exists():
            shutil.rmtree(old)
        os.replace(path, old)
        os.replace(tmp, path)
        shutil.rmtree(old)
    else:
        os.replace(tmp, path)
    return path


def load_checkpoint(path, expected_hash: str | None = None) -> Checkpoint:
    path = Path(path)
    if not (path / "state.json").exists():
        raise FileNotFoundError(f"{path} is not a checkpoint directory (no state.json)")
    state = json.loads((path / "state.json").read_text())
    if expected_hash is not None and state["config_hash"] != expected_hash:
        raise CheckpointMismatchError(
            f"{path}: checkpoint config hash {state['config_hash'][:12]} differs from the current "
            f"configuration ({expected_hash[:12]}); refusing to load"
        )
    if config_hash(state["config"]) != state["config_hash"]:
        raise CheckpointMismatchError(f"{path}: stored config does not match its recorded hash")
    buf = (path / "tensors.bin").read_bytes()
    params, optim = {}, {}
    pos = 0
    for entry in state["tensors"]:
        kind, name = entry.split(":", 1)
        if pos >= len(buf):
            raise TruncatedPayloadError(f"{path / 'tensors.bin'}: ends before tensor {name!r}")
        arr, pos = decode_tensor(buf, pos, str(path / "tensors.bin"))
        (params if kind == "param" else optim)[name] = arr
    if pos != len(buf):
        raise TruncatedPayloadError(f"{path / 'tensors.bin'}: {len(buf) - pos} unexpected trailing bytes")
    return Checkpoint(state["phase"], state["epoch"], state["config"], params, state["optimizer_step"],
                      optim, state["rng"], state["history"], state["config_hash"])
