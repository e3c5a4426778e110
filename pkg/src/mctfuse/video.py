"""Pooled-attention video encoder carrying classification and distillation tokens.

Token layout at every depth is ``[cls_1..cls_C, kd_1..kd_C, p_1..p_N]``. The
2C multi-classification tokens never enter spatial pooling; only the patch
grid is pooled, so the token region keeps a fixed length through the network.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import LayerNorm, Linear, Mlp, Module, ModuleList, Parameter, RngStreams, Tensor, ops
from .autodiff.nn import trunc_normal
from .autodiff.tensor import DimensionError

NUM_LABELS = 20
POOL_MODES = ("mean", "conv")


@dataclass
class VideoBranchConfig:
    num_blocks: int = 4
    base_dim: int = 16
    num_heads: int = 2
    expand_after: tuple[int, ...] = (1,)
    in_channels: int = 1
    input_size: tuple[int, int, int] = (8, 32, 32)
    patch_kernel: tuple[int, int, int] = (2, 4, 4)
    patch_stride: tuple[int, int, int] = (2, 4, 4)
    patch_padding: tuple[int, int, int] = (0, 0, 0)
    qkv_pool_kernel: tuple[int, int, int] = (3, 3, 3)
    adaptive_pool_kernel: bool = True
    pool_mode: str = "conv"
    kv_stride: tuple[int, int, int] = (1, 4, 4)
    q_stride_at_expand: tuple[int, int, int] = (1, 2, 2)
    mlp_ratio: float = 4.0
    qkv_bias: bool = True
    path_drop: float = 0.2
    mct_count: int = 4
    pos_embed: bool = True
    pos_init_std: float = 0.02
    init_std: float | None = None

    def __post_init__(self):
        for name in ("expand_after", "input_size", "patch_kernel", "patch_stride", "patch_padding",
                     "qkv_pool_kernel", "kv_stride", "q_stride_at_expand"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.num_blocks < 1 or self.base_dim < 1 or self.num_heads < 1 or self.mct_count < 1:
            raise ValueError("num_blocks, base_dim, num_heads and mct_count must be positive")
        if any(not 0 <= b < self.num_blocks for b in self.expand_after):
            raise ValueError(f"expand_after {self.expand_after} outside [0, {self.num_blocks})")
        for name in ("patch_kernel", "patch_stride", "qkv_pool_kernel", "kv_stride", "q_stride_at_expand"):
            if any(v <= 0 for v in getattr(self, name)):
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.pool_mode not in POOL_MODES:
            raise ValueError(f"pool_mode must be one of {POOL_MODES}, got {self.pool_mode!r}")
        if self.base_dim % self.num_heads:
            raise ValueError("base_dim must be divisible by num_heads")

    @classmethod
    def full_scale(cls, **overrides) -> "VideoBranchConfig":
        """MViTv2-S layout with the hyperparameters reported for the full model."""
        kw = dict(
            num_blocks=16, base_dim=96, num_heads=1, expand_after=(1, 3, 14), in_channels=3,
            input_size=(16, 224, 224), patch_kernel=(3, 7, 7), patch_stride=(2, 4, 4),
            patch_padding=(1, 3, 3), qkv_pool_kernel=(3, 3, 3), kv_stride=(1, 8, 8),
            q_stride_at_expand=(1, 2, 2), mlp_ratio=4.0, qkv_bias=True, path_drop=0.2,
            mct_count=4, pos_embed=False, adaptive_pool_kernel=False, pool_mode="conv",
        )
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    # -- static layout ---------------------------------------------------------
    def block_dims(self) -> list[tuple[int, int]]:
        """(d_in, d_out) per block; width doubles at each expand block."""
        dims, d = [], self.base_dim
        for b in range(self.num_blocks):
            d_out = d * 2 if b in self.expand_after else d
            dims.append((d, d_out))
            d = d_out
        return dims

    def block_heads(self) -> list[int]:
        heads, h = [], self.num_heads
        for b in range(self.num_blocks):
            if b in self.expand_after:
                h *= 2
            heads.append(h)
        return heads

    def patch_grid(self) -> tuple[int, int, int]:
        return ops.pool_output_shape(self.input_size, self.patch_kernel, self.patch_stride, self.patch_padding)

    def block_strides(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        """(q_stride, kv_stride) per block; the kv stride shrinks as q pooling reduces resolution."""
        out = []
        reduced = [1, 1, 1]
        for b in range(self.num_blocks):
            q = self.q_stride_at_expand if b in self.expand_after else (1, 1, 1)
            kv = tuple(max(1, s // r) for s, r in zip(self.kv_stride, reduced))
            out.append((tuple(q), kv))
            reduced = [r * s for r, s in zip(reduced, q)]
        return out

    def pool_kernel(self, stride) -> tuple[int, int, int]:
        """Pooling window for a stride: ``stride + 1`` per axis (1 when unstrided) or the fixed kernel."""
        if self.adaptive_pool_kernel:
            return tuple(s + 1 if s > 1 else 1 for s in stride)
        return self.qkv_pool_kernel

    def grid_schedule(self) -> list[tuple[int, int, int]]:
        """Patch grid after each block."""
        grid = self.patch_grid()
        out = []
        for q, _ in self.block_strides():
            if q != (1, 1, 1):
                kernel = self.pool_kernel(q)
                grid = ops.pool_output_shape(grid, kernel, q, tuple(k // 2 for k in kernel))
            out.append(grid)
        return out


@dataclass
class TokenSequence:
    """Tokens of one branch at one depth: ``[B, 2C + N, d]`` plus the patch grid shape."""

    tokens: Tensor
    mct_count: int
    grid: tuple[int, int, int]

    @property
    def mct_cls(self) -> Tensor:
        return self.tokens[:, : self.mct_count]

    @property
    def mct_kd(self) -> Tensor:
        return self.tokens[:, self.mct_count: 2 * self.mct_count]

    @property
    def patches(self) -> Tensor:
        return self.tokens[:, 2 * self.mct_count:]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]


@dataclass
class BranchOutput:
    cls: Tensor
    kd: Tensor
    site_cls: list[Tensor] = field(default_factory=list)
    site_kd: list[Tensor] = field(default_factory=list)
    site_blocks: list[int] = field(default_factory=list)


def expand_batch(p: Tensor, batch: int) -> Tensor:
    return ops.add(Tensor(np.zeros((batch,) + p.shape, dtype=p.dtype)), p)


def pool_grid_tokens(t: Tensor, n_mct: int, grid, kernel, stride,
                     pool: "GridPool | None" = None) -> tuple[Tensor, tuple[int, int, int]]:
    """Pool the patch part of ``[..., 2C + N, d]``; the leading 2C tokens pass through untouched."""
    if pool is None and all(k == 1 for k in kernel) and all(s == 1 for s in stride):
        return t, tuple(grid)
    pad = tuple(k // 2 for k in kernel)
    lead = t.shape[:-2]
    n_tok = 2 * n_mct
    head, body = ops.split(t, [n_tok, t.shape[-2] - n_tok], axis=-2)
    body = ops.reshape(body, lead + tuple(grid) + (t.shape[-1],))
    body = ops.strided_mean_pool3d(body, kernel, stride, pad) if pool is None else pool(body)
    new_grid = body.shape[-4:-1]
    body = ops.reshape(body, lead + (int(np.prod(new_grid)), t.shape[-1]))
    return ops.concat([head, body], axis=-2), tuple(new_grid)


class GridPool(Module):
    """Depthwise 3-D convolution over ``[..., T, H, W, d]`` followed by LayerNorm.

    The filter starts as the window mean, so at initialisation the output is
    a normalised mean pool (zero padding counts towards the window here).
    """

    def __init__(self, d: int, kernel, stride, dtype=np.float32):
        super().__init__()
        self.kernel, self.stride = tuple(kernel), tuple(stride)
        self.padding = tuple(k // 2 for k in self.kernel)
        K = int(np.prod(self.kernel))
        self.weight = Parameter(np.full((K, d), 1.0 / K), dtype)
        self.norm = LayerNorm(d, dtype)

    def forward(self, x: Tensor) -> Tensor:
        cols = ops.unfold3d(x, self.kernel, self.stride, self.padding)
        K, d = self.weight.shape
        cols = ops.reshape(cols, cols.shape[:-1] + (K, d))
        return self.norm(ops.sum(ops.mul(cols, self.weight), axis=-2))


class PatchEmbed(Module):
    """3-D convolution to ``dim`` channels, flattened to tokens."""

    def __init__(self, cfg: VideoBranchConfig, streams: RngStreams, dtype=np.float32):
        super().__init__()
        self.kernel, self.stride, self.padding = cfg.patch_kernel, cfg.patch_stride, cfg.patch_padding
        fan_in = int(np.prod(self.kernel)) * cfg.in_channels
        self.proj = Linear(fan_in, cfg.base_dim, streams, dtype=dtype, std=cfg.init_std)

    def forward(self, clip: Tensor) -> tuple[Tensor, tuple[int, int, int]]:
        if clip.ndim != 5:
            raise DimensionError(f"clip must be [B, T, H, W, channels], got {clip.shape}")
        cols = ops.unfold3d(clip, self.kernel, self.stride, self.padding)
        grid = cols.shape[1:4]
        x = self.proj(cols)
        return ops.reshape(x, (clip.shape[0], int(np.prod(grid)), x.shape[-1])), tuple(grid)


class PooledAttentionBlock(Module):
    def __init__(self, d_in: int, d_out: int, heads: int, q_stride, kv_stride, q_kernel, kv_kernel,
                 mlp_ratio: float, qkv_bias: bool, drop_path: float, mct_count: int,
                 streams: RngStreams, dtype=np.float32, init_std: float | None = None,
                 pool_mode: str = "mean"):
        super().__init__()
        if d_out % heads:
            raise ValueError(f"width {d_out} not divisible by {heads} heads")
        self.d_in, self.d_out, self.heads = d_in, d_out, heads
        self.q_stride, self.kv_stride = tuple(q_stride), tuple(kv_stride)
        self.q_kernel, self.kv_kernel = tuple(q_kernel), tuple(kv_kernel)
        self.mct_count = mct_count
        self.drop_path = drop_path
        self.scale = (d_out // heads) ** -0.5
        self.streams = streams
        self.norm1 = LayerNorm(d_in, dtype)
        self.qkv = Linear(d_in, 3 * d_out, streams, bias=qkv_bias, dtype=dtype, std=init_std)
        self.proj = Linear(d_out, d_out, streams, dtype=dtype, std=init_std)
        self.res_proj = Linear(d_in, d_out, streams, dtype=dtype, std=init_std) if d_in != d_out else None
        self.norm2 = LayerNorm(d_out, dtype)
        self.mlp = Mlp(d_out, int(d_out * mlp_ratio), streams, dtype=dtype, std=init_std)
        self.last_attention: np.ndarray | None = None
        dh = d_out // heads
        conv = pool_mode == "conv"
        self.pool_q = GridPool(dh, self.q_kernel, self.q_stride, dtype) if conv and self.pools_q else None
        kv_active = self.kv_stride != (1, 1, 1) or self.kv_kernel != (1, 1, 1)
        self.pool_k = GridPool(dh, self.kv_kernel, self.kv_stride, dtype) if conv and kv_active else None
        self.pool_v = GridPool(dh, self.kv_kernel, self.kv_stride, dtype) if conv and kv_active else None

    @property
    def pools_q(self) -> bool:
        return self.q_stride != (1, 1, 1)

    def forward(self, seq: TokenSequence) -> TokenSequence:
        x = seq.tokens
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"block expects width {self.d_in}, got {x.shape[-1]}")
        B, L, _ = x.shape
        h, dh = self.heads, self.d_out // self.heads
        qkv = self.qkv(self.norm1(x))
        qkv = ops.transpose(ops.reshape(qkv, (B, L, 3, h, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]

        grid = seq.grid
        q_grid = grid
        if self.pools_q:
            q, q_grid = pool_grid_tokens(q, self.mct_count, grid, self.q_kernel, self.q_stride, self.pool_q)
        k, _ = pool_grid_tokens(k, self.mct_count, grid, self.kv_kernel, self.kv_stride, self.pool_k)
        v, _ = pool_grid_tokens(v, self.mct_count, grid, self.kv_kernel, self.kv_stride, self.pool_v)

        attn = ops.softmax(ops.mul(q @ ops.swapaxes(k, -1, -2), self.scale), axis=-1)
        self.last_attention = attn.data
        out = attn @ v
        # residual pooling connection on patch queries; MCT tokens are left out, as class tokens are
        n_tok = 2 * self.mct_count
        head, body = ops.split(out, [n_tok, out.shape[-2] - n_tok], axis=-2)
        out = ops.concat([head, ops.add(body, q[:, :, n_tok:])], axis=-2)
        Lq = out.shape[-2]
        out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (B, Lq, self.d_out))
        out = self.proj(out)

        res = x
        if self.pools_q:
            res, _ = pool_grid_tokens(res, self.mct_count, grid, self.q_kernel, self.q_stride)
        if self.res_proj is not None:
            res = self.res_proj(res)
        x = ops.add(res, ops.drop_path(out, self.drop_path, self.streams, "drop_path", self.training))
        x = ops.add(x, ops.drop_path(self.mlp(self.norm2(x)), self.drop_path, self.streams, "drop_path",
                                     self.training))
        return TokenSequence(x, self.mct_count, q_grid)


class VideoBranch(Module):
    def __init__(self, cfg: VideoBranchConfig, streams: RngStreams, num_labels: int = NUM_LABELS,
                 dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.streams = streams
        C, d = cfg.mct_count, cfg.base_dim
        self.patch_embed = PatchEmbed(cfg, streams, dtype)
        grid = cfg.patch_grid()
        if cfg.pos_embed:
            self.pos = Parameter(trunc_normal(streams.next("init"), (int(np.prod(grid)), d), cfg.pos_init_std), dtype)
        else:
            self.pos = None
        self.cls_tokens = Parameter(trunc_normal(streams.next("init"), (C, d)), dtype)
        self.kd_tokens = Parameter(trunc_normal(streams.next("init"), (C, d)), dtype)
        dims = cfg.block_dims()
        heads = cfg.block_heads()
        strides = cfg.block_strides()
        n = cfg.num_blocks
        dpr = [cfg.path_drop * i / max(1, n - 1) for i in range(n)]
        self.blocks = ModuleList(
            PooledAttentionBlock(dims[b][0], dims[b][1], heads[b], strides[b][0], strides[b][1],
                                 cfg.pool_kernel(strides[b][0]), cfg.pool_kernel(strides[b][1]),
                                 cfg.mlp_ratio, cfg.qkv_bias, dpr[b], C, streams, dtype, cfg.init_std,
                                 cfg.pool_mode)
            for b in range(n)
        )
        self.out_dim = dims[-1][1]
        self.norm = LayerNorm(self.out_dim, dtype)
        self.head = Linear(self.out_dim, num_labels, streams, dtype=dtype, std=cfg.init_std)

    def patch_tokens(self, clip: Tensor) -> tuple[Tensor, tuple[int, int, int]]:
        x, grid = self.patch_embed(clip)
        if self.pos is not None:
            x = ops.add(x, self.pos)
        return x, grid

    def prepend_mct(self, patches: Tensor, grid) -> TokenSequence:
        return prepend_mct(patches, self.cls_tokens, self.kd_tokens, grid)

    def forward(self, clip: Tensor, site_blocks: Sequence[int] = ()) -> BranchOutput:
        x, grid = self.patch_tokens(clip)
        seq = self.prepend_mct(x, grid)
        C = self.cfg.mct_count
        sites = set(site_blocks)
        out = BranchOutput(cls=None, kd=None)  # type: ignore[arg-type]
        for b, block in enumerate(self.blocks):
            seq = block(seq)
            if b in sites:
                out.site_blocks.append(b)
                out.site_cls.append(seq.mct_cls)
                out.site_kd.append(seq.mct_kd)
        tokens = self.norm(seq.tokens[:, : 2 * C])
        out.cls = tokens[:, :C]
        out.kd = tokens[:, C:]
        return out


def prepend_mct(patches: Tensor, cls_params: Tensor, kd_params: Tensor, grid) -> TokenSequence:
    d = patches.shape[-1]
    if cls_params.shape[-1] != d or kd_params.shape[-1] != d or cls_params.shape != kd_params.shape:
        raise DimensionError(
            f"token dims {cls_params.shape}/{kd_params.shape} do not match patch width {d}"
        )
    B = patches.shape[0]
    seq = ops.concat([expand_batch(cls_params, B), expand_batch(kd_params, B), patches], axis=1)
    return TokenSequence(seq, cls_params.shape[0], tuple(grid))
