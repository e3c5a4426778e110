"""Cross-modal token distillation, token fusion, prediction heads and fusion baselines."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import LayerNorm, Linear, Mlp, Module, RngStreams, Tensor, ops
from .autodiff.tensor import DimensionError

KD_POLICIES = ("FL", "DE", "SP")
TOKEN_FUSIONS = ("mctf", "sum", "multiplication", "self_attention", "cross_attention")
LATE_FUSIONS = ("sum", "concat", "mul")
HEAD_KINDS = ("softmax", "sigmoid")

# CLS-Fusion is written with both argument orders; this fixes the one used.
CLS_FUSION_ORDER = ("m", "r")


class ConfigurationError(ValueError):
    pass


# -- distillation sites -------------------------------------------------------------

def video_site_blocks(policy: str, num_blocks: int, expand_after: Sequence[int]) -> list[int]:
    """Blocks after which distillation tokens are compared.

    SP: after every block that downsamples, plus the final block.
    DE: after every block. FL: final block only.
    """
    if policy == "FL":
        return [num_blocks - 1]
    if policy == "DE":
        return list(range(num_blocks))
    if policy == "SP":
        return sorted(set(expand_after) | {num_blocks - 1})
    raise ConfigurationError(f"unknown KD placement {policy!r}; expected one of {KD_POLICIES}")


def default_site_alignment(n_video_sites: int, skeleton_sites: Sequence[int]) -> list[int]:
    """Map each video site to a skeleton block at the same relative depth."""
    if not skeleton_sites:
        raise ConfigurationError("skeleton branch exposes no distillation sites")
    n = len(skeleton_sites)
    return [skeleton_sites[int(np.ceil((i + 1) * n / n_video_sites)) - 1] for i in range(n_video_sites)]


@dataclass
class KdPlacement:
    policy: str
    site_alignment: list[int]

    @classmethod
    def build(cls, policy: str, num_blocks: int, expand_after: Sequence[int],
              skeleton_sites: Sequence[int], alignment: Sequence[int] | None = None) -> "KdPlacement":
        video_sites = video_site_blocks(policy, num_blocks, expand_after)
        if alignment is None:
            alignment = default_site_alignment(len(video_sites), skeleton_sites)
        alignment = [int(a) for a in alignment]
        if len(alignment) != len(video_sites):
            raise ConfigurationError(
                f"site alignment has {len(alignment)} entries but {policy} gives {len(video_sites)} video sites"
            )
        bad = [a for a in alignment if a not in skeleton_sites]
        if bad:
            raise ConfigurationError(f"alignment targets {bad} are not skeleton sites {list(skeleton_sites)}")
        return cls(policy, alignment)


@dataclass
class KdSiteRecord:
    depth: int
    receiver: Tensor   # [B, C, d_r]
    sender: Tensor     # [B, C, d_s]
    adapter: Module | None = None


class SiteAdapter(Module):
    """Linear map from sender width to receiver width; identity-initialised when square."""

    def __init__(self, d_s: int, d_r: int, streams: RngStreams, dtype=np.float32):
        super().__init__()
        self.linear = Linear(d_s, d_r, streams, bias=True, dtype=dtype)
        if d_s == d_r:
            self.linear.weight.data = np.eye(d_s, dtype=dtype)
            self.linear.bias.data = np.zeros(d_r, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.linear(x)


def mctkd_loss(sites: Sequence[KdSiteRecord], symmetric: bool = False) -> Tensor:
    """Mean over sites of the per-token KL between receiver and adapted sender.

    The adapted sender is the detached target; with ``symmetric`` both
    directions are averaged and gradients flow into both branches.
    """
    if not sites:
        raise ConfigurationError("mctkd_loss needs at least one site")
    total = None
    for site in sites:
        r, s = site.receiver, site.sender
        if r.shape[-2] != s.shape[-2]:
            raise DimensionError(f"token counts differ at depth {site.depth}: {r.shape} vs {s.shape}")
        if site.adapter is not None:
            s = site.adapter(s)
        if symmetric:
            loss = ops.mul(ops.add(ops.kl_divergence(r, s), ops.kl_divergence(s, r)), 0.5)
        else:
            loss = ops.kl_divergence(r, s.detach())
        total = loss if total is None else ops.add(total, loss)
    return ops.mul(total, 1.0 / len(sites))


# -- token fusion ---------------------------------------------------------------

def attention(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    return ops.softmax(ops.mul(q @ ops.swapaxes(k, -1, -2), scale), axis=-1) @ v


class MCTF(Module):
    """Six-term mixed self/cross attention between classification and distillation tokens."""

    def __init__(self, d: int, streams: RngStreams, qk_scale: float = 0.8, attn_drop: float = 0.0,
                 path_drop: float = 0.2, dtype=np.float32):
        super().__init__()
        self.qk_scale, self.attn_drop, self.path_drop = qk_scale, attn_drop, path_drop
        self.streams = streams
        self.norm_m = LayerNorm(d, dtype)
        self.norm_r = LayerNorm(d, dtype)
        self.k_m, self.q_m, self.v_m = (Linear(d, d, streams, dtype=dtype) for _ in range(3))
        self.k_r, self.q_r, self.v_r = (Linear(d, d, streams, dtype=dtype) for _ in range(3))
        # output projections of the m-set terms, then the r-set terms
        self.p_mm, self.p_mr, self.p_rm = (Linear(d, d, streams, dtype=dtype) for _ in range(3))
        self.p_rr, self.p_rm_r, self.p_mr_r = (Linear(d, d, streams, dtype=dtype) for _ in range(3))
        self.p_f = Linear(2 * d, d, streams, dtype=dtype)
        self.norm_f = LayerNorm(d, dtype)
        self.mlp = Mlp(d, d, streams, dtype=dtype)

    def _dp(self, x: Tensor) -> Tensor:
        return ops.dropout(x, self.attn_drop, self.streams, "mctf/attn_drop", self.training)

    def cls_fusion(self, x_m: Tensor, x_r: Tensor) -> Tensor:
        sc = self.qk_scale
        K_m, Q_m, V_m = self.k_m(x_m), self.q_m(x_m), self.v_m(x_m)
        K_r, Q_r, V_r = self.k_r(x_r), self.q_r(x_r), self.v_r(x_r)
        a_m = ops.add(ops.add(
            self.p_mm(self._dp(attention(Q_m, K_m, V_m, sc))),
            self.p_mr(self._dp(attention(Q_m, K_r, V_m, sc)))),
            self.p_rm(self._dp(attention(Q_r, K_m, V_m, sc))))
        a_r = ops.add(ops.add(
            self.p_rr(self._dp(attention(Q_r, K_r, V_r, sc))),
            self.p_mr_r(self._dp(attention(Q_m, K_r, V_r, sc)))),
            self.p_rm_r(self._dp(attention(Q_r, K_m, V_r, sc))))
        return self.p_f(ops.concat([a_m, a_r], axis=-1))

    def forward(self, cls_m: Tensor, cls_r: Tensor) -> Tensor:
        if cls_m.shape != cls_r.shape:
            raise DimensionError(f"MCTF inputs differ: {cls_m.shape} vs {cls_r.shape}")
        cls_a = ops.mul(ops.add(cls_m, cls_r), 0.5)
        args = {"m": self.norm_m(cls_m), "r": self.norm_r(cls_r)}
        fused = ops.add(cls_a, self.cls_fusion(args[CLS_FUSION_ORDER[0]], args[CLS_FUSION_ORDER[1]]))
        update = ops.drop_path(self.mlp(self.norm_f(fused)), self.path_drop, self.streams,
                               "mctf/drop_path", self.training)
        return ops.add(cls_a, update)


class SumFusion(Module):
    def forward(self, cls_m, cls_r):
        _check_pair(cls_m, cls_r)
        return ops.add(cls_m, cls_r)


class MultiplicationFusion(Module):
    def forward(self, cls_m, cls_r):
        _check_pair(cls_m, cls_r)
        return ops.mul(cls_m, cls_r)


class SelfAttentionFusion(Module):
    """Single-head self-attention over both token sets, then the two halves are averaged."""

    def __init__(self, d: int, streams: RngStreams, dtype=np.float32):
        super().__init__()
        self.norm = LayerNorm(d, dtype)
        self.qkv = Linear(d, 3 * d, streams, dtype=dtype)
        self.proj = Linear(d, d, streams, dtype=dtype)
        self.scale = d ** -0.5

    def forward(self, cls_m, cls_r):
        _check_pair(cls_m, cls_r)
        C, d = cls_m.shape[-2], cls_m.shape[-1]
        x = ops.concat([cls_m, cls_r], axis=-2)
        q, k, v = ops.split(self.qkv(self.norm(x)), [d, d, d], axis=-1)
        x = ops.add(x, self.proj(attention(q, k, v, self.scale)))
        first, second = ops.split(x, [C, C], axis=-2)
        return ops.mul(ops.add(first, second), 0.5)


class CrossAttentionFusion(Module):
    """Queries from one token set attend to the other, in both directions, summed."""

    def __init__(self, d: int, streams: RngStreams, dtype=np.float32):
        super().__init__()
        self.norm_m = LayerNorm(d, dtype)
        self.norm_r = LayerNorm(d, dtype)
        self.q_m, self.kv_r = Linear(d, d, streams, dtype=dtype), Linear(d, 2 * d, streams, dtype=dtype)
        self.q_r, self.kv_m = Linear(d, d, streams, dtype=dtype), Linear(d, 2 * d, streams, dtype=dtype)
        self.proj = Linear(d, d, streams, dtype=dtype)
        self.scale = d ** -0.5

    def forward(self, cls_m, cls_r):
        _check_pair(cls_m, cls_r)
        d = cls_m.shape[-1]
        xm, xr = self.norm_m(cls_m), self.norm_r(cls_r)
        k_r, v_r = ops.split(self.kv_r(xr), [d, d], axis=-1)
        k_m, v_m = ops.split(self.kv_m(xm), [d, d], axis=-1)
        mixed = ops.add(attention(self.q_m(xm), k_r, v_r, self.scale),
                        attention(self.q_r(xr), k_m, v_m, self.scale))
        return ops.add(ops.mul(ops.add(cls_m, cls_r), 0.5), self.proj(mixed))


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"fusion inputs differ: {a.shape} vs {b.shape}")


def build_token_fusion(kind: str, d: int, streams: RngStreams, dtype=np.float32, **mctf_kwargs) -> Module:
    if kind == "mctf":
        return MCTF(d, streams, dtype=dtype, **mctf_kwargs)
    if kind == "sum":
        return SumFusion()
    if kind == "multiplication":
        return MultiplicationFusion()
    if kind == "self_attention":
        return SelfAttentionFusion(d, streams, dtype)
    if kind == "cross_attention":
        return CrossAttentionFusion(d, streams, dtype)
    raise ConfigurationError(f"unknown fusion kind {kind!r}; expected one of {TOKEN_FUSIONS}")


def fusion_baseline(kind: str, cls_m: Tensor, cls_r: Tensor, streams: RngStreams | None = None) -> Tensor:
    """One-shot token fusion with freshly initialised parameters (for shape/identity checks)."""
    module = build_token_fusion(kind, cls_m.shape[-1], streams or RngStreams(0), dtype=cls_m.dtype)
    return module(cls_m, cls_r)


# -- prediction -------------------------------------------------------------------

def aggregate_predict(tokens: Tensor, head, kind: str = "softmax") -> Tensor:
    """Mean over the token axis, project to label logits, then SoftMax (or sigmoid)."""
    if tokens.shape[-2] < 1:
        raise DimensionError("need at least one token")
    logits = head(ops.mean(tokens, axis=-2))
    if kind == "softmax":
        return ops.softmax(logits, axis=-1)
    if kind == "sigmoid":
        return ops.sigmoid(logits)
    raise ConfigurationError(f"unknown head kind {kind!r}")


def dual_branch_predict(y_video: Tensor, y_skeleton: Tensor) -> Tensor:
    if y_video.shape != y_skeleton.shape:
        raise DimensionError(f"prediction shapes differ: {y_video.shape} vs {y_skeleton.shape}")
    return ops.mul(ops.add(y_video, y_skeleton), 0.5)


class LateFusionHead(Module):
    """Fuses branch-level representations before a shared classification head."""

    def __init__(self, kind: str, d_video: int, d_skeleton: int, num_labels: int, streams: RngStreams,
                 dtype=np.float32):
        super().__init__()
        if kind not in LATE_FUSIONS:
            raise ConfigurationError(f"unknown late fusion {kind!r}; expected one of {LATE_FUSIONS}")
        self.kind = kind
        self.align = Linear(d_skeleton, d_video, streams, dtype=dtype) if d_skeleton != d_video else None
        d_head = 2 * d_video if kind == "concat" else d_video
        self.head = Linear(d_head, num_labels, streams, dtype=dtype)

    def forward(self, rep_video: Tensor, rep_skeleton: Tensor, head_kind: str = "softmax") -> Tensor:
        if self.align is not None:
            rep_skeleton = self.align(rep_skeleton)
        return late_fusion_baseline(self.kind, rep_video, rep_skeleton, self.head, head_kind)


def late_fusion_baseline(kind: str, rep_video: Tensor, rep_skeleton: Tensor, head,
                         head_kind: str = "softmax") -> Tensor:
    if kind == "sum":
        fused = ops.add(rep_video, rep_skeleton)
    elif kind == "mul":
        fused = ops.mul(rep_video, rep_skeleton)
    elif kind == "concat":
        fused = ops.concat([rep_video, rep_skeleton], axis=-1)
    else:
        raise ConfigurationError(f"unknown late fusion {kind!r}; expected one of {LATE_FUSIONS}")
    logits = head(fused)
    return ops.softmax(logits, axis=-1) if head_kind == "softmax" else ops.sigmoid(logits)
