"""Finite-difference gradient suite: every differentiable op plus small branch composites.

Each case draws a random instance, builds a scalar closure and compares the
autodiff gradient of one input against central differences in float64.
Scalar outputs are formed as ``sum(out * w)`` with a random ``w`` so every
output coordinate contributes with a distinct weight.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import RngStreams, Tensor, finite_diff_grad_check, ops
from .fusion import MCTF, KdSiteRecord, SiteAdapter, mctkd_loss
from .skeleton import GcnBranchConfig, SkeletonBranch, star_adjacency
from .video import GridPool, VideoBranch, VideoBranchConfig

TOLERANCE = 1e-5
STEP = 1e-6
F64 = np.float64

Closure = Callable[[Tensor], Tensor]
Builder = Callable[[np.random.Generator, int], tuple[Closure, np.ndarray]]


@dataclass
class CaseResult:
    name: str
    instances: int
    max_rel_err: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=F64))


def _weighted(out: Tensor, rng: np.random.Generator) -> Closure:
    w = _t(rng.standard_normal(out.shape))
    return lambda y: ops.sum(ops.mul(y, w))


def _unary(op, make_x=None) -> Builder:
    def build(rng, i):
        shape = tuple(rng.integers(1, 4, size=rng.integers(1, 4)))
        x = rng.standard_normal(shape) if make_x is None else make_x(rng, shape)
        proj = _weighted(op(_t(x)), rng)
        return (lambda t: proj(op(t))), x
    return build


def _away_from_zero(rng, shape):
    x = rng.standard_normal(shape)
    return np.sign(x) * (np.abs(x) + 0.1)


def _binary(op, make_b=None) -> Builder:
    """Alternates the differentiated operand; odd instances broadcast ``b`` over ``a``."""
    def build(rng, i):
        shape = tuple(rng.integers(1, 4, size=rng.integers(1, 4)))
        a = rng.standard_normal(shape)
        b_shape = shape if i % 4 < 2 else (1,) * (len(shape) - 1) + shape[-1:]
        b = rng.standard_normal(b_shape) if make_b is None else make_b(rng, b_shape)
        proj = _weighted(op(_t(a), _t(b)), rng)
        if i % 2 == 0:
            return (lambda t: proj(op(t, _t(b)))), a
        return (lambda t: proj(op(_t(a), t))), b
    return build


def _matmul(rng, i):
    m, k, n = rng.integers(1, 4, size=3)
    batch = tuple(rng.integers(1, 3, size=rng.integers(0, 3)))
    a = rng.standard_normal(batch + (m, k))
    b = rng.standard_normal((k, n) if i % 3 == 0 else batch + (k, n))
    proj = _weighted(ops.matmul(_t(a), _t(b)), rng)
    if i % 2 == 0:
        return (lambda t: proj(ops.matmul(t, _t(b)))), a
    return (lambda t: proj(ops.matmul(_t(a), t))), b


def _reduce(op):
    def build(rng, i):
        shape = tuple(rng.integers(1, 4, size=3))
        axis = [None, 0, 1, 2, (0, 2), -1][i % 6]
        keep = bool(i % 2)
        x = rng.standard_normal(shape)
        proj = _weighted(op(_t(x), axis=axis, keepdims=keep), rng)
        return (lambda t: proj(op(t, axis=axis, keepdims=keep))), x
    return build


def _reshape(rng, i):
    x = rng.standard_normal((2, 3, int(rng.integers(1, 4))))
    shape = (x.shape[2], 6)
    proj = _weighted(ops.reshape(_t(x), shape), rng)
    return (lambda t: proj(ops.reshape(t, shape))), x


def _transpose(rng, i):
    x = rng.standard_normal(tuple(rng.integers(1, 4, size=3)))
    axes = tuple(rng.permutation(3))
    proj = _weighted(ops.transpose(_t(x), axes), rng)
    return (lambda t: proj(ops.transpose(t, axes))), x


def _swapaxes(rng, i):
    x = rng.standard_normal(tuple(rng.integers(1, 4, size=3)))
    a, b = rng.choice(3, size=2, replace=False)
    proj = _weighted(ops.swapaxes(_t(x), int(a), int(b)), rng)
    return (lambda t: proj(ops.swapaxes(t, int(a), int(b)))), x


def _getitem(rng, i):
    x = rng.standard_normal((4, 3))
    # repeated advanced indices must accumulate
    idx = [np.s_[1:3], np.s_[:, ::2], rng.integers(0, 4, size=5), np.s_[rng.integers(0, 4, size=3), 1]][i % 4]
    proj = _weighted(ops.getitem(_t(x), idx), rng)
    return (lambda t: proj(ops.getitem(t, idx))), x


def _concat(rng, i):
    parts = [rng.standard_normal((2, int(rng.integers(1, 4)))) for _ in range(3)]
    j = i % 3
    proj = _weighted(ops.concat([_t(p) for p in parts], axis=1), rng)

    def f(t):
        return proj(ops.concat([t if k == j else _t(p) for k, p in enumerate(parts)], axis=1))
    return f, parts[j]


def _split(rng, i):
    sizes = [int(v) for v in rng.integers(1, 3, size=3)]
    x = rng.standard_normal((sum(sizes), 2))
    w = [_t(rng.standard_normal((s, 2))) for s in sizes[:2]]   # last piece unused: zero gradient

    def f(t):
        a, b, _ = ops.split(t, sizes, axis=0)
        return ops.add(ops.sum(ops.mul(a, w[0])), ops.sum(ops.mul(b, w[1])))
    return f, x


def _pad(rng, i):
    x = rng.standard_normal((2, 3))
    widths = [tuple(int(v) for v in rng.integers(0, 3, size=2)) for _ in range(2)]
    proj = _weighted(ops.pad(_t(x), widths), rng)
    return (lambda t: proj(ops.pad(t, widths))), x


def _softmax(op):
    def build(rng, i):
        x = rng.standard_normal((2, int(rng.integers(2, 5))))
        axis = -1 if i % 2 else 0
        proj = _weighted(op(_t(x), axis=axis), rng)
        return (lambda t: proj(op(t, axis=axis))), x
    return build


def _layer_norm(rng, i):
    d = int(rng.integers(2, 5))
    args = [rng.standard_normal((3, d)), 1.0 + 0.3 * rng.standard_normal(d), rng.standard_normal(d)]
    j = i % 3
    proj = _weighted(ops.layer_norm(*map(_t, args)), rng)
    return (lambda t: proj(ops.layer_norm(*[t if k == j else _t(a) for k, a in enumerate(args)]))), args[j]


def _linear(rng, i):
    d_in, d_out = rng.integers(1, 4, size=2)
    args = [rng.standard_normal((2, 3, d_in)), rng.standard_normal((d_in, d_out)), rng.standard_normal(d_out)]
    j = i % 3
    proj = _weighted(ops.linear(*map(_t, args)), rng)
    return (lambda t: proj(ops.linear(*[t if k == j else _t(a) for k, a in enumerate(args)]))), args[j]


def _grid_args(rng):
    grid = tuple(int(v) for v in rng.integers(1, 5, size=3))
    kernel = tuple(int(rng.integers(1, g + 1)) if g > 1 else 1 for g in grid)
    stride = tuple(int(v) for v in rng.integers(1, 3, size=3))
    padding = tuple(int(rng.integers(0, k // 2 + 1)) for k in kernel)
    return grid, kernel, stride, padding


def _pool(op):
    def build(rng, i):
        grid, kernel, stride, padding = _grid_args(rng)
        x = rng.standard_normal((1,) + grid + (2,))
        proj = _weighted(op(_t(x), kernel, stride, padding), rng)
        return (lambda t: proj(op(t, kernel, stride, padding))), x
    return build


def _stochastic(op, name):
    """Training-mode masks come from a fresh stream per call, so the closure is deterministic."""
    def build(rng, i):
        x = rng.standard_normal((4, 3))
        p = float(rng.uniform(0.1, 0.6))
        seed = int(rng.integers(1 << 30))
        run = lambda t: op(t, p, RngStreams(seed), name, True)
        proj = _weighted(run(_t(x)), rng)
        return (lambda t: proj(run(t))), x
    return build


def _kl(rng, i):
    p, q = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 4))
    if i % 2 == 0:
        return (lambda t: ops.kl_divergence(t, _t(q))), p
    return (lambda t: ops.kl_divergence(_t(p), t)), q


def _bce(rng, i):
    y = rng.uniform(0.05, 0.95, size=(3, 4))
    lab = rng.integers(0, 2, size=(3, 4))
    return (lambda t: ops.bce_loss(t, lab)), y


def _grid_pool(rng, i):
    grid, kernel, stride, _ = _grid_args(rng)
    pool = GridPool(2, kernel, stride, F64)
    pool.weight.data = rng.standard_normal(pool.weight.shape)
    x = rng.standard_normal((1,) + grid + (2,))
    proj = _weighted(pool(_t(x)), rng)
    return (lambda t: proj(pool(t))), x


def _mctf(rng, i):
    m = MCTF(3, RngStreams(i), path_drop=0.0, dtype=F64)
    a, b = rng.standard_normal((2, 2, 3)), rng.standard_normal((2, 2, 3))
    proj = _weighted(m(_t(a), _t(b)), rng)
    if i % 2 == 0:
        return (lambda t: proj(m(t, _t(b)))), a
    return (lambda t: proj(m(_t(a), t))), b


def _mctkd(rng, i):
    adapters = [SiteAdapter(3, 4, RngStreams(i), F64), None]
    sender = [rng.standard_normal((2, 2, 3)), rng.standard_normal((2, 2, 4))]
    recv = [rng.standard_normal((2, 2, 4)) for _ in range(2)]
    sym = bool(i % 2)

    def f(t):
        sites = [KdSiteRecord(k, t if k == 0 else _t(recv[k]), _t(sender[k]), adapters[k]) for k in range(2)]
        return mctkd_loss(sites, symmetric=sym)
    return f, recv[0]


def _swap_attr(owner, attr: str, loss: Callable[[], Tensor]) -> tuple[Closure, np.ndarray]:
    """Closure that temporarily substitutes ``owner.attr`` with the probe tensor."""
    orig = getattr(owner, attr)

    def f(t):
        object.__setattr__(owner, attr, t)
        try:
            return loss()
        finally:
            object.__setattr__(owner, attr, orig)
    return f, orig.data


def _video_composite(rng, i):
    cfg = VideoBranchConfig(num_blocks=2, base_dim=4, num_heads=2, expand_after=(0,), input_size=(2, 4, 4),
                            patch_kernel=(1, 1, 1), patch_stride=(1, 1, 1), kv_stride=(1, 2, 2),
                            path_drop=0.0, mct_count=2)
    net = VideoBranch(cfg, RngStreams(i), num_labels=3, dtype=F64)
    for p in net.parameters():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    clip = rng.standard_normal((1,) + cfg.input_size + (1,))
    w_cls, w_kd = _t(rng.standard_normal((1, 2, 8))), _t(rng.standard_normal((1, 2, 8)))

    def loss(x=None):
        out = net(_t(clip) if x is None else x, site_blocks=())
        return ops.add(ops.sum(ops.mul(out.cls, w_cls)), ops.sum(ops.mul(out.kd, w_kd)))

    b0, b1 = net.blocks[0], net.blocks[1]
    targets = [None, (b0.qkv, "weight"), (b0.pool_q, "weight"), (b0.pool_k, "weight"), (b0.pool_v, "weight"),
               (net, "cls_tokens"), (net, "kd_tokens"), (b0.res_proj, "weight"), (b1.mlp.fc1, "weight")]
    target = targets[i % len(targets)]
    if target is None:
        return loss, clip
    return _swap_attr(*target, loss)


def _skeleton_composite(rng, i):
    cfg = GcnBranchConfig(num_blocks=2, dims=(4, 4), mct_count=2, num_joints=3)
    net = SkeletonBranch(cfg, RngStreams(i), star_adjacency(3), num_labels=3, dtype=F64)
    for p in net.parameters():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    joints = rng.standard_normal((1, 3, 3, 2))
    w_cls, w_kd = _t(rng.standard_normal((1, 2, 4))), _t(rng.standard_normal((1, 2, 4)))

    def loss(x=None):
        out = net(_t(joints) if x is None else x, site_blocks=(1,))
        return ops.add(ops.sum(ops.mul(out.cls, w_cls)), ops.sum(ops.mul(out.kd, w_kd)))

    targets = [None, (net.blocks[0].spatial, "weight"), (net.blocks[1].temporal, "weight"),
               (net.inject[0], "weight"), (net.inject[0], "mix"), (net.merge[0], "weight"), (net, "cls_tokens")]
    target = targets[i % len(targets)]
    if target is None:
        return loss, joints
    return _swap_attr(*target, loss)


CASES: dict[str, Builder] = {
    "add": _binary(ops.add),
    "sub": _binary(ops.sub),
    "mul": _binary(ops.mul),
    "div": _binary(ops.div, lambda rng, s: np.sign(rng.standard_normal(s)) * rng.uniform(0.5, 2.0, s)),
    "exp": _unary(ops.exp),
    "log": _unary(ops.log, lambda rng, s: rng.uniform(0.2, 3.0, s)),
    "relu": _unary(ops.relu, _away_from_zero),
    "sigmoid": _unary(ops.sigmoid),
    "tanh": _unary(ops.tanh),
    "gelu": _unary(ops.gelu),
    "matmul": _matmul,
    "sum": _reduce(ops.sum),
    "mean": _reduce(ops.mean),
    "reshape": _reshape,
    "transpose": _transpose,
    "swapaxes": _swapaxes,
    "getitem": _getitem,
    "concat": _concat,
    "split": _split,
    "pad": _pad,
    "softmax": _softmax(ops.softmax),
    "log_softmax": _softmax(ops.log_softmax),
    "layer_norm": _layer_norm,
    "linear": _linear,
    "strided_mean_pool3d": _pool(ops.strided_mean_pool3d),
    "unfold3d": _pool(ops.unfold3d),
    "dropout": _stochastic(ops.dropout, "dropout"),
    "drop_path": _stochastic(ops.drop_path, "drop_path"),
    "kl_divergence": _kl,
    "bce_loss": _bce,
    "grid_pool": _grid_pool,
    "mctf": _mctf,
    "mctkd_loss": _mctkd,
    "video_branch_2block": _video_composite,
    "skeleton_branch_2block": _skeleton_composite,
}


def run_case(name: str, instances: int = 100, seed: int = 0) -> CaseResult:
    build = CASES[name]
    rng = np.random.default_rng([seed, sorted(CASES).index(name)])
    start = time.perf_counter()
    worst = 0.0
    for i in range(instances):
        f, x = build(rng, i)
        err = finite_diff_grad_check(f, Tensor(np.asarray(x, dtype=F64)), h=STEP)
        worst = max(worst, err)
    return CaseResult(name, instances, worst, time.perf_counter() - start)


def run_suite(instances: int = 100, seed: int = 0, names=None) -> list[CaseResult]:
    return [run_case(n, instances, seed) for n in (names or CASES)]
