from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad


class NonDeterministicError(RuntimeError):
    """The checked closure returned different values for the same input."""


def finite_diff_grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4) -> float:
    """Max relative error between autodiff and central-difference gradients of ``f`` at ``x``.

    The error per coordinate is ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    ``f`` must be deterministic; closures that draw fresh randomness on every
    call (e.g. training-mode dropout) are rejected.
    """
    base = np.array(x.data, dtype=np.float64, copy=True)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise ValueError(f"gradient check needs a scalar-valued closure, got shape {out.shape}")
    f0 = float(out.data.reshape(()))
    if not np.isfinite(f0):
        raise FloatingPointError("closure returned a non-finite value")
    with no_grad():
        again = f(Tensor(base.copy()))
    if float(again.data.reshape(())) != f0:
        raise NonDeterministicError("closure is not deterministic; fix any random masks before checking")
    out.backward()
    g_ad = probe.grad if probe.grad is not None else np.zeros_like(base)

    g_fd = np.zeros_like(base)
    flat = g_fd.reshape(-1)
    with no_grad():
        _central_differences(f, base, h, flat)

    denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    return float(np.max(np.abs(g_ad - g_fd) / denom)) if base.size else 0.0


def _central_differences(f, base: np.ndarray, h: float, flat: np.ndarray) -> None:
    for i in range(base.size):
        xp = base.copy().reshape(-1)
        xp[i] += h
        fp = float(f(Tensor(xp.reshape(base.shape))).data.reshape(()))
        xm = base.copy().reshape(-1)
        xm[i] -= h
        fm = float(f(Tensor(xm.reshape(base.shape))).data.reshape(()))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"closure non-finite near coordinate {i}")
        flat[i] = (fp - fm) / (2.0 * h)
