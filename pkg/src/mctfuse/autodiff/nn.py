"""Parameter containers and small layers built on the autodiff ops."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import ops
from .rng import RngStreams
from .tensor import Tensor


def Parameter(data, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Module:
    """Registers parameters and sub-modules in attribute assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            if p.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {p.shape} vs {arr.shape}")
            p.data = np.array(arr, dtype=p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        self._modules[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return np.clip(rng.standard_normal(shape), -2.0, 2.0) * std


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, streams: RngStreams, bias: bool = True,
                 dtype=np.float32, std: float | None = None):
        super().__init__()
        rng = streams.next("init")
        if std is None:
            # uniform fan-in init for weight and bias
            bound = 1.0 / np.sqrt(d_in)
            self.weight = Parameter(rng.uniform(-bound, bound, (d_in, d_out)), dtype)
            self.bias = Parameter(rng.uniform(-bound, bound, d_out), dtype) if bias else None
        else:
            self.weight = Parameter(trunc_normal(rng, (d_in, d_out), std), dtype)
            self.bias = Parameter(np.zeros(d_out), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32):
        super().__init__()
        self.gamma = Parameter(np.ones(d), dtype)
        self.beta = Parameter(np.zeros(d), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta)


class Mlp(Module):
    def __init__(self, d: int, hidden: int, streams: RngStreams, d_out: int | None = None,
                 dtype=np.float32, std: float | None = None):
        super().__init__()
        self.fc1 = Linear(d, hidden, streams, dtype=dtype, std=std)
        self.fc2 = Linear(hidden, d if d_out is None else d_out, streams, dtype=dtype, std=std)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))
