from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: dict,
               lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One in-place AdamW update.

    ``state`` holds ``step`` and per-parameter ``m``/``v`` lists; it is created
    on first use. Weight decay is decoupled: weights shrink by ``lr * wd``
    directly, independent of the moment estimates.
    """
    b1, b2 = betas
    if "m" not in state:
        state["step"] = 0
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    if len(state["m"]) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if m.shape != p.shape:
            raise ValueError(f"optimizer state shape {m.shape} does not match parameter {p.shape}")
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr / bc1) * m / (np.sqrt(v) / math.sqrt(bc2) + eps)


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict = {}

    def step(self) -> None:
        adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                   self.lr, self.betas, self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i in range(len(self.state.get("m", []))):
            out[f"m.{i}"] = self.state["m"][i]
            out[f"v.{i}"] = self.state["v"][i]
        return out

    def load_state(self, step: int, arrays: dict[str, np.ndarray]) -> None:
        if step == 0:
            self.state = {}
            return
        n = len(self.params)
        self.state = {
            "step": int(step),
            "m": [np.array(arrays[f"m.{i}"], copy=True) for i in range(n)],
            "v": [np.array(arrays[f"v.{i}"], copy=True) for i in range(n)],
        }
