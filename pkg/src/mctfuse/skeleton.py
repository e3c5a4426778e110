"""Skeleton GCN encoder with multi-classification token injection.

After the first GCN block a classification token set and a distillation token
set join the flattened spatio-temporal nodes. Each later block runs the
spatial/temporal graph convolution, projects nodes and tokens jointly, and
merges pooled node content into the classification tokens.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .autodiff import Linear, Module, ModuleList, Parameter, RngStreams, Tensor, ops
from .autodiff.nn import trunc_normal
from .autodiff.tensor import DimensionError
from .video import NUM_LABELS, BranchOutput, expand_batch


def star_adjacency(num_joints: int = 5) -> np.ndarray:
    """Root joint 0 linked to every limb joint, with self-loops, row-normalised."""
    if num_joints < 2:
        raise ValueError("a star graph needs at least two joints")
    a = np.eye(num_joints)
    a[0, 1:] = 1.0
    a[1:, 0] = 1.0
    return normalize_adjacency(a)


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"adjacency must be square, got {a.shape}")
    if not np.allclose(a, a.T):
        raise ValueError("adjacency must be symmetric")
    a = a.copy()
    np.fill_diagonal(a, 1.0)
    return a / a.sum(axis=1, keepdims=True)


@dataclass
class GcnBranchConfig:
    num_blocks: int = 3
    dims: tuple[int, ...] = (16, 16, 16)
    mct_count: int = 4
    temporal_kernel: int = 3
    in_dim: int = 2
    num_joints: int = 5
    activation: str = "relu"
    input_center: bool = True
    input_scale: float = 5.0
    joint_embed: bool = True
    joint_embed_std: float = 1.0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if self.num_blocks < 2:
            raise ValueError("the skeleton branch needs at least two blocks (tokens join after the first)")
        if len(self.dims) != self.num_blocks:
            raise ValueError(f"dims {self.dims} must list one width per block ({self.num_blocks})")
        if len(set(self.dims)) != 1:
            raise ValueError("token-carrying blocks share one width; dims must all be equal")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ValueError("temporal_kernel must be a positive odd integer")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def site_blocks(self) -> list[int]:
        """Blocks after which a distillation-token snapshot exists."""
        return list(range(1, self.num_blocks))


_ACTIVATIONS = {"relu": ops.relu, "gelu": ops.gelu, "identity": lambda x: x}


class StGcnBlock(Module):
    """Per-frame ``A X W`` followed by a temporal convolution over frames for each joint."""

    def __init__(self, d_in: int, d_out: int, streams: RngStreams, temporal_kernel: int = 3,
                 activation: str = "relu", residual: bool = True, dtype=np.float32):
        super().__init__()
        self.spatial = Linear(d_in, d_out, streams, dtype=dtype)
        self.temporal = Linear(temporal_kernel * d_out, d_out, streams, dtype=dtype)
        self.k = temporal_kernel
        self.act = _ACTIVATIONS[activation]
        self.residual = residual and d_in == d_out

    def forward(self, x: Tensor, adjacency) -> Tensor:
        a = adjacency if isinstance(adjacency, Tensor) else Tensor(np.asarray(adjacency, dtype=x.dtype))
        J = x.shape[-2]
        if a.shape != (J, J):
            raise DimensionError(f"adjacency {a.shape} does not match {J} joints")
        y = self.act(self.spatial(ops.matmul(a, x)))
        T = x.shape[1]
        p = self.k // 2
        yp = ops.pad(y, [(0, 0), (p, p), (0, 0), (0, 0)])
        taps = [yp[:, i:i + T] for i in range(self.k)]
        y = self.temporal(ops.concat(taps, axis=-1))
        if self.residual:
            y = ops.add(y, x)
        return self.act(y)


class SetProjection(Module):
    """Linear map over a concatenated node/token set: ``Z W + b + mean(Z) U``.

    The mean term lets tokens and nodes exchange content while staying
    equivariant to permutations of the set. Initialised to the identity.
    """

    def __init__(self, d: int, streams: RngStreams, dtype=np.float32):
        super().__init__()
        self.weight = Parameter(np.eye(d), dtype)
        self.bias = Parameter(np.zeros(d), dtype)
        self.mix = Parameter(trunc_normal(streams.next("init"), (d, d), 1.0 / np.sqrt(d)), dtype)

    def forward(self, z: Tensor) -> Tensor:
        pooled = ops.linear(ops.mean(z, axis=-2, keepdims=True), self.mix)
        return ops.add(ops.linear(z, self.weight, self.bias), pooled)


def mct_inject(nodes_flat: Tensor, cls_m: Tensor, cls_r: Tensor, proj) -> tuple[Tensor, Tensor, Tensor]:
    """Concatenate nodes and both token sets along the node axis, project, split back."""
    d = nodes_flat.shape[-1]
    if cls_m.shape[-1] != d or cls_r.shape[-1] != d:
        raise DimensionError(f"channel mismatch: nodes {nodes_flat.shape}, tokens {cls_m.shape}/{cls_r.shape}")
    sizes = [nodes_flat.shape[-2], cls_m.shape[-2], cls_r.shape[-2]]
    z = proj(ops.concat([nodes_flat, cls_m, cls_r], axis=-2))
    nodes, m, r = ops.split(z, sizes, axis=-2)
    return nodes, m, r


def node_to_token_merge(nodes_flat: Tensor, cls_m: Tensor, proj) -> Tensor:
    """``cls_m + P_s(mean over nodes)``, the projected mean broadcast over all tokens."""
    return ops.add(cls_m, proj(ops.mean(nodes_flat, axis=-2, keepdims=True)))


class SkeletonBranch(Module):
    def __init__(self, cfg: GcnBranchConfig, streams: RngStreams, adjacency: np.ndarray | None = None,
                 num_labels: int = NUM_LABELS, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        adjacency = star_adjacency(cfg.num_joints) if adjacency is None else np.asarray(adjacency)
        if adjacency.shape != (cfg.num_joints, cfg.num_joints):
            raise DimensionError(f"adjacency {adjacency.shape} does not match {cfg.num_joints} joints")
        self.adjacency = np.asarray(adjacency, dtype=dtype)
        d = cfg.dims[0]
        dims_in = (cfg.in_dim,) + cfg.dims[:-1]
        self.blocks = ModuleList(
            StGcnBlock(dims_in[b], cfg.dims[b], streams, cfg.temporal_kernel, cfg.activation, dtype=dtype)
            for b in range(cfg.num_blocks)
        )
        C = cfg.mct_count
        self.cls_tokens = Parameter(trunc_normal(streams.next("init"), (C, d)), dtype)
        self.kd_tokens = Parameter(trunc_normal(streams.next("init"), (C, d)), dtype)
        self.inject = ModuleList(SetProjection(d, streams, dtype) for _ in range(cfg.num_blocks - 1))
        self.merge = ModuleList(Linear(d, d, streams, dtype=dtype) for _ in range(cfg.num_blocks - 1))
        self.out_dim = d
        self.head = Linear(d, num_labels, streams, dtype=dtype)
        # shared weights plus a symmetric graph cannot tell limbs apart; a learned
        # per-joint offset after the first block restores joint identity
        self.joint_pos = (Parameter(trunc_normal(streams.next("init"), (cfg.num_joints, d), cfg.joint_embed_std),
                                    dtype) if cfg.joint_embed else None)

    def forward(self, joints: Tensor, site_blocks: Sequence[int] = ()) -> BranchOutput:
        if joints.ndim != 4:
            raise DimensionError(f"joints must be [B, T, J, coords], got {joints.shape}")
        B, T, J, _ = joints.shape
        adj = Tensor(self.adjacency)
        if self.cfg.input_center:
            # drop static pose so the motion that carries the labels dominates
            joints = ops.sub(joints, ops.mean(joints, axis=1, keepdims=True))
        if self.cfg.input_scale != 1.0:
            joints = ops.mul(joints, self.cfg.input_scale)
        x = self.blocks[0](joints, adj)
        if self.joint_pos is not None:
            x = ops.add(x, self.joint_pos)
        cls_m = expand_batch(self.cls_tokens, B)
        cls_r = expand_batch(self.kd_tokens, B)
        out = BranchOutput(cls=None, kd=None)  # type: ignore[arg-type]
        sites = set(site_blocks)
        for b in range(1, self.cfg.num_blocks):
            x = self.blocks[b](x, adj)
            d = x.shape[-1]
            flat, cls_m, cls_r = mct_inject(ops.reshape(x, (B, T * J, d)), cls_m, cls_r, self.inject[b - 1])
            cls_m = node_to_token_merge(flat, cls_m, self.merge[b - 1])
            x = ops.reshape(flat, (B, T, J, d))
            if b in sites:
                out.site_blocks.append(b)
                out.site_cls.append(cls_m)
                out.site_kd.append(cls_r)
        out.cls, out.kd = cls_m, cls_r
        return out
