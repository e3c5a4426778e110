"""Differentiable numeric primitives."""
from __future__ import annotations

import builtins
import math
from typing import Sequence

import numpy as np

from .rng import RngStreams
from .tensor import DimensionError, NumericError, Tensor, as_tensor, make_result

LN_EPS = 1e-5
BCE_CLAMP = 1e-7


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result(
        a.data / b.data, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return make_result(out, (x,), backward)


# -- contractions and reductions ----------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(out, (a, b), backward)


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


# -- shape manipulation --------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def _has_array_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    advanced = _has_array_index(idx)

    def backward(g):
        gx = np.zeros_like(x.data)
        if advanced:
            np.add.at(gx, idx, g)
        else:
            gx[idx] += g
        return (gx,)

    return make_result(np.array(out, copy=True), (x,), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat of an empty list")
    ndim = parts[0].ndim
    axis = axis % ndim
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != ndim or any(p.shape[i] != ref[i] for i in range(ndim) if i != axis):
            raise DimensionError(
                f"concat along axis {axis}: shapes {[q.shape for q in parts]} disagree off-axis"
            )
    if len(parts) == 1:
        return parts[0]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=axis)
    return make_result(out, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    axis = axis % x.ndim
    if builtins.sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not sum to {x.shape[axis]} (shape {x.shape})")
    outs = []
    start = 0
    for n in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + n)
        outs.append(getitem(x, tuple(idx)))
        start += n
    return outs


def pad(x: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    widths = list(widths)
    out = np.pad(x.data, widths)
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return make_result(out, (x,), lambda g: (g[crop],))


def detach(x: Tensor) -> Tensor:
    return x.detach()


# -- normalisation and attention primitives ---------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax received non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward)


def _log_softmax_data(v: np.ndarray, axis: int) -> np.ndarray:
    z = v - v.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError("log_softmax received non-finite input")
    out = _log_softmax_data(x.data, axis)
    p = np.exp(out)
    return make_result(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm params {gamma.shape}/{beta.shape} do not match last dim of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gxhat = g * gamma.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(out, (x, gamma, beta), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    out = np.matmul(x.data, w.data)
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gx = np.matmul(g, w.data.T)
        g2 = g.reshape(-1, g.shape[-1])
        gw = np.matmul(x.data.reshape(-1, x.shape[-1]).T, g2)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(out, parents, backward)


# -- 3-D windows ------------------------------------------------------------------

def pool_output_shape(size: Sequence[int], kernel, stride, padding) -> tuple[int, ...]:
    out = []
    for n, k, s, p in zip(size, kernel, stride, padding):
        if k <= 0 or s <= 0 or p < 0:
            raise DimensionError(f"kernel/stride must be positive, got kernel={kernel} stride={stride}")
        if k > n + 2 * p:
            raise DimensionError(
                f"kernel {tuple(kernel)} larger than padded extent of grid {tuple(size)} with padding {tuple(padding)}"
            )
        out.append((n + 2 * p - k) // s + 1)
    return tuple(out)


def _window_slices(offset, stride, out_shape):
    return tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, out_shape))


def _offsets(kernel):
    kt, kh, kw = kernel
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                yield (a, b, c)


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise DimensionError(f"expected a 3-tuple, got {v}")
    return v


def strided_mean_pool3d(x: Tensor, kernel, stride, padding=(0, 0, 0)) -> Tensor:
    """Mean pooling over the (T, H, W) axes of a ``[..., T, H, W, d]`` tensor.

    Zero-padded cells do not count towards the window mean.
    """
    kernel, stride, padding = _triple(kernel), _triple(stride), _triple(padding)
    if x.ndim < 4:
        raise DimensionError(f"pooling expects [..., T, H, W, d], got {x.shape}")
    grid = x.shape[-4:-1]
    out_grid = pool_output_shape(grid, kernel, stride, padding)
    lead = x.ndim - 4
    pw = [(0, 0)] * lead + [(p, p) for p in padding] + [(0, 0)]
    xp = np.pad(x.data, pw)
    ones = np.pad(np.ones(grid, dtype=x.dtype), [(p, p) for p in padding])
    sums = np.zeros(x.shape[:lead] + out_grid + (x.shape[-1],), dtype=x.dtype)
    count = np.zeros(out_grid, dtype=x.dtype)
    pre = (slice(None),) * lead
    for off in _offsets(kernel):
        sl = _window_slices(off, stride, out_grid)
        sums += xp[pre + sl]
        count += ones[sl]
    count = count[..., None]
    out = sums / count

    def backward(g):
        gs = g / count
        gp = np.zeros_like(xp)
        for off in _offsets(kernel):
            gp[pre + _window_slices(off, stride, out_grid)] += gs
        crop = pre + tuple(slice(p, p + n) for p, n in zip(padding, grid))
        return (gp[crop],)

    return make_result(out, (x,), backward)


def unfold3d(x: Tensor, kernel, stride, padding=(0, 0, 0)) -> Tensor:
    """Extract windows of ``[..., T, H, W, c]`` into ``[..., T', H', W', kt*kh*kw*c]``."""
    kernel, stride, padding = _triple(kernel), _triple(stride), _triple(padding)
    grid = x.shape[-4:-1]
    out_grid = pool_output_shape(grid, kernel, stride, padding)
    lead = x.ndim - 4
    pw = [(0, 0)] * lead + [(p, p) for p in padding] + [(0, 0)]
    xp = np.pad(x.data, pw)
    pre = (slice(None),) * lead
    offsets = list(_offsets(kernel))
    cols = np.stack([xp[pre + _window_slices(o, stride, out_grid)] for o in offsets], axis=-2)
    c = x.shape[-1]
    out = cols.reshape(cols.shape[:-2] + (len(offsets) * c,))

    def backward(g):
        g = g.reshape(g.shape[:-1] + (len(offsets), c))
        gp = np.zeros_like(xp)
        for i, o in enumerate(offsets):
            gp[pre + _window_slices(o, stride, out_grid)] += g[..., i, :]
        crop = pre + tuple(slice(p, p + n) for p, n in zip(padding, grid))
        return (gp[crop],)

    return make_result(out, (x,), backward)


# -- stochastic regularisers --------------------------------------------------------

def dropout(x: Tensor, p: float, streams: RngStreams | None = None, stream: str = "dropout",
            training: bool = True) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if streams is None:
        raise ValueError("training-mode dropout needs an RngStreams instance")
    keep = streams.next(stream).random(x.shape) >= p
    scale = (keep / (1.0 - p)).astype(x.dtype)
    return make_result(x.data * scale, (x,), lambda g: (g * scale,))


def drop_path(x: Tensor, p: float, streams: RngStreams | None = None, stream: str = "drop_path",
              training: bool = True) -> Tensor:
    """Per-sample stochastic depth over the leading axis."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop-path rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if streams is None:
        raise ValueError("training-mode drop_path needs an RngStreams instance")
    keep = streams.next(stream).random(x.shape[0]) >= p
    scale = (keep / (1.0 - p)).astype(x.dtype).reshape((-1,) + (1,) * (x.ndim - 1))
    return make_result(x.data * scale, (x,), lambda g: (g * scale,))


# -- losses -------------------------------------------------------------------------

def kl_divergence(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Mean over leading dims of KL(q || p), both given as logits over the last axis.

    ``q`` is the target distribution, ``p`` the prediction.
    """
    if p_logits.shape != q_logits.shape:
        raise DimensionError(f"kl_divergence shape mismatch: {p_logits.shape} vs {q_logits.shape}")
    logp = _log_softmax_data(p_logits.data, -1)
    logq = _log_softmax_data(q_logits.data, -1)
    q = np.exp(logq)
    rows = max(1, int(np.prod(p_logits.shape[:-1])))
    diff = logq - logp
    value = np.asarray((q * diff).sum() / rows, dtype=p_logits.dtype)

    def backward(g):
        p = np.exp(logp)
        gp = g * (p - q) / rows
        gq = g * q * (diff - (q * diff).sum(axis=-1, keepdims=True)) / rows
        return gp.astype(p_logits.dtype), gq.astype(q_logits.dtype)

    return make_result(value, (p_logits, q_logits), backward)


def bce_loss(y: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of probabilities ``y`` against 0/1 ``labels``."""
    lab = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if lab.shape != y.shape:
        raise DimensionError(f"bce_loss shape mismatch: {y.shape} vs labels {lab.shape}")
    if not np.all((lab == 0) | (lab == 1)):
        raise ValueError("bce_loss labels must be 0 or 1")
    lab = lab.astype(y.dtype)
    yc = np.clip(y.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    inside = (y.data >= BCE_CLAMP) & (y.data <= 1.0 - BCE_CLAMP)
    n = y.size
    value = np.asarray(-(lab * np.log(yc) + (1.0 - lab) * np.log(1.0 - yc)).sum() / n, dtype=y.dtype)

    def backward(g):
        gy = g * (-(lab / yc) + (1.0 - lab) / (1.0 - yc)) / n
        return ((gy * inside).astype(y.dtype),)

    return make_result(value, (y,), backward)
