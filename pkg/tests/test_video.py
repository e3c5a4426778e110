import numpy as np
import pytest

from mctfuse.autodiff import RngStreams, Tensor, ops
from mctfuse.autodiff.tensor import DimensionError
from mctfuse.video import GridPool, VideoBranch, VideoBranchConfig, pool_grid_tokens, prepend_mct


def test_default_forward_shapes(rng):
    cfg = VideoBranchConfig()
    net = VideoBranch(cfg, RngStreams(0))
    clip = Tensor(rng.standard_normal((2,) + cfg.input_size + (1,)).astype(np.float32))
    out = net(clip, site_blocks=[1, 3])
    d_final = cfg.block_dims()[-1][1]
    assert out.cls.shape == (2, cfg.mct_count, d_final)
    assert out.kd.shape == (2, cfg.mct_count, d_final)
    assert out.site_blocks == [1, 3]
    assert [t.shape[-1] for t in out.site_kd] == [cfg.block_dims()[1][1], cfg.block_dims()[3][1]]


def test_full_scale_layout_is_structural():
    cfg = VideoBranchConfig.full_scale()
    dims = cfg.block_dims()
    assert len(dims) == 16
    assert [b for b, (i, o) in enumerate(dims) if o != i] == [1, 3, 14]
    assert dims[-1][1] == 768
    assert cfg.patch_grid() == (8, 56, 56)
    assert cfg.grid_schedule()[-1] == (8, 7, 7)
    kv = [s[1] for s in cfg.block_strides()]
    assert kv[0] == (1, 8, 8) and kv[2] == (1, 4, 4) and kv[4] == (1, 2, 2) and kv[15] == (1, 1, 1)


def test_token_region_keeps_length_and_grid_follows_schedule(rng):
    cfg = VideoBranchConfig()
    net = VideoBranch(cfg, RngStreams(1))
    x, grid = net.patch_tokens(Tensor(rng.standard_normal((1,) + cfg.input_size + (1,)).astype(np.float32)))
    seq = net.prepend_mct(x, grid)
    for block, want in zip(net.blocks, cfg.grid_schedule()):
        seq = block(seq)
        assert seq.grid == want
        assert seq.tokens.shape[1] == 2 * cfg.mct_count + int(np.prod(want))


def test_pooling_passes_mct_tokens_through_untouched(rng):
    t = Tensor(rng.standard_normal((2, 4 + 16, 3)))
    pooled, grid = pool_grid_tokens(t, 2, (1, 4, 4), (1, 3, 3), (1, 2, 2))
    assert grid == (1, 2, 2)
    np.testing.assert_array_equal(pooled.data[:, :4], t.data[:, :4])


def test_grid_pool_starts_as_normalised_mean_pool(rng):
    x = Tensor(rng.standard_normal((1, 2, 4, 4, 3)))
    pool = GridPool(3, (1, 3, 3), (1, 2, 2), np.float64)
    got = pool(x).data
    # zero padding counts towards the window in the convolution
    cols = ops.unfold3d(x, (1, 3, 3), (1, 2, 2), (0, 1, 1)).data.reshape(1, 2, 2, 2, 9, 3)
    mean = cols.mean(axis=-2)
    mu = mean.mean(-1, keepdims=True)
    want = (mean - mu) / np.sqrt(mean.var(-1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_mean_pool_mode_has_no_pool_parameters():
    net = VideoBranch(VideoBranchConfig(pool_mode="mean"), RngStreams(0))
    assert not [n for n, _ in net.named_parameters() if ".pool_" in n]
    conv = VideoBranch(VideoBranchConfig(), RngStreams(0))
    assert [n for n, _ in conv.named_parameters() if ".pool_" in n]


def test_same_seed_same_parameters():
    a = VideoBranch(VideoBranchConfig(), RngStreams(4)).state_dict()
    b = VideoBranch(VideoBranchConfig(), RngStreams(4)).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


@pytest.mark.parametrize("kw", [dict(pool_mode="max"), dict(base_dim=10, num_heads=3), dict(expand_after=(7,)),
                                dict(kv_stride=(0, 1, 1)), dict(mct_count=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        VideoBranchConfig(**kw)


def test_prepend_mct_rejects_width_mismatch():
    with pytest.raises(DimensionError):
        prepend_mct(Tensor(np.zeros((1, 4, 8))), Tensor(np.zeros((2, 6))), Tensor(np.zeros((2, 6))), (1, 2, 2))


def test_clip_rank_checked():
    net = VideoBranch(VideoBranchConfig(), RngStreams(0))
    with pytest.raises(DimensionError):
        net(Tensor(np.zeros((8, 32, 32, 1), dtype=np.float32)))
