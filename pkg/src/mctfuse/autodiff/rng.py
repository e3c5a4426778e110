"""Named, counter-based random streams.

Each draw is keyed by ``(global seed, stream name, call index)``: the key
selects a Philox key from a hash of seed and name, and the call index lives in
the high word of the Philox counter. Two streams never interfere, and the
sequence of draws from one stream does not depend on how draws from other
streams are interleaved.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _philox_key(seed: int, name: str) -> np.ndarray:
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return np.frombuffer(digest[:16], dtype="<u8").copy()


def stream_generator(seed: int, name: str, index: int) -> np.random.Generator:
    counter = np.array([0, 0, 0, int(index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=_philox_key(seed, name), counter=counter))


class RngStreams:
    """Tracks a call counter per stream name."""

    def __init__(self, seed: int = 0, counters: dict[str, int] | None = None):
        self.seed = int(seed)
        self.counters: dict[str, int] = dict(counters or {})

    def next(self, name: str) -> np.random.Generator:
        idx = self.counters.get(name, 0)
        self.counters[name] = idx + 1
        return stream_generator(self.seed, name, idx)

    def peek(self, name: str, index: int) -> np.random.Generator:
        return stream_generator(self.seed, name, index)

    def state(self) -> dict:
        return {"seed": self.seed, "counters": dict(sorted(self.counters.items()))}

    @classmethod
    def from_state(cls, state: dict) -> "RngStreams":
        return cls(state["seed"], state["counters"])
