"""Tests for the residual embedding network."""

import numpy as np
import pytest

from qnet import ops
from qnet.backbone import Backbone, BackboneConfig, ResBlock, build_backbone, embed_image


def all_values(model):
    return np.concatenate([p.value.ravel() for _, p in model.named_parameters()])


def test_config_rejects_bad_width_schedule():
    with pytest.raises(ValueError):
        BackboneConfig(stem_width=8, width_schedule=(8, 16, 24, 48)).validate()
    with pytest.raises(ValueError):
        BackboneConfig(stem_width=4, width_schedule=(8, 16, 32, 64)).validate()
    with pytest.raises(ValueError):
        BackboneConfig(block_count=6).validate()


def test_same_seed_bit_identical():
    a = build_backbone(BackboneConfig(), seed=11)
    b = build_backbone(BackboneConfig(), seed=11)
    assert np.array_equal(all_values(a), all_values(b))
    c = build_backbone(BackboneConfig(), seed=12)
    assert not np.array_equal(all_values(a), all_values(c))


def test_parameter_count_closed_form():
    cfg = BackboneConfig()
    bb = build_backbone(cfg, seed=0)
    # independent sum over layers from the config arithmetic
    k, sk = cfg.block_kernel, cfg.stem_kernel
    w = cfg.width_schedule
    expected = w[0] * cfg.input_channels * sk * sk + 2 * w[0]  # stem conv + BN
    plan = [(w[0], w[0], False), (w[0], w[0], False),
            (w[0], w[1], True), (w[1], w[1], False),
            (w[1], w[2], True), (w[2], w[2], False),
            (w[2], w[3], True), (w[3], w[3], False)]
    for ci, co, down in plan:
        expected += co * ci * k * k + 2 * co      # conv1 + bn1
        expected += co * co * k * k + 2 * co      # conv2 + bn2
        if down:
            expected += co * ci + 2 * co          # 1x1 projection + BN
    actual = sum(p.value.size for _, p in bb.named_parameters())
    assert actual == expected


def test_embed_shapes_and_stride_arithmetic():
    bb = build_backbone(BackboneConfig(), seed=0)
    for h, final in [(64, 2), (96, 3)]:
        x = np.random.default_rng(0).standard_normal((2, 3, h, h)).astype(np.float32)
        feat, cache = bb.forward(x, train=False)
        assert feat.shape == (2, 64)  # 8 * 2**3
        pre_gap = cache[6]
        assert pre_gap.shape == (2, 64, final, final)  # H shrinks by 2**5


def test_embed_rejects_wrong_channels_and_small_input():
    bb = build_backbone(BackboneConfig(), seed=0)
    with pytest.raises(ops.DimensionError):
        bb.forward(np.zeros((1, 2, 64, 64), dtype=np.float32), train=False)
    with pytest.raises(ops.DimensionError):
        bb.forward(np.zeros((1, 3, 16, 16), dtype=np.float32), train=False)


def test_uniform_input_features_are_gap_of_maps():
    bb = build_backbone(BackboneConfig(), seed=3)
    x = np.full((1, 3, 64, 64), 0.25, dtype=np.float32)
    feat, cache = bb.forward(x, train=False)
    pre_gap = cache[6]
    # features are exactly the spatial means of the final maps
    assert np.allclose(feat, pre_gap.mean(axis=(2, 3)), atol=1e-7)
    # a uniform input stays uniform away from the zero-padding border:
    # stem output interior (3 pad-influenced pixels on each side) is constant
    stem_out, _ = ops.conv2d_forward(x.astype(np.float64),
                                     bb.stem_conv.weight.value.astype(np.float64), 2, 3)
    interior = stem_out[:, :, 4:-4, 4:-4]
    spread = interior.max(axis=(2, 3)) - interior.min(axis=(2, 3))
    assert np.all(spread < 1e-12)


def test_identical_slices_get_identical_features():
    bb = build_backbone(BackboneConfig(), seed=4)
    one = np.random.default_rng(1).standard_normal((1, 3, 64, 64)).astype(np.float32)
    batch = np.concatenate([one, one], axis=0)
    feat = embed_image(batch, bb)
    assert np.array_equal(feat[0], feat[1])


def test_resblock_zero_weights_is_relu():
    rng = np.random.default_rng(5)
    blk = ResBlock(np.random.default_rng(0), 4, 4, downsample=False, dtype=np.float64)
    blk.conv1.weight.value[...] = 0
    blk.conv2.weight.value[...] = 0
    x = rng.standard_normal((2, 4, 6, 6))
    y, _ = blk.forward(x, train=True)
    assert np.allclose(y, np.maximum(x, 0))


def test_resblock_downsample_halves_and_doubles():
    blk = ResBlock(np.random.default_rng(1), 4, 8, downsample=True, dtype=np.float32)
    x = np.random.default_rng(2).standard_normal((2, 4, 8, 8)).astype(np.float32)
    y, _ = blk.forward(x, train=True)
    assert y.shape == (2, 8, 4, 4)


def test_zeroed_residual_paths_reduce_to_relu_pool_projection():
    cfg = BackboneConfig()
    bb = build_backbone(cfg, seed=6, dtype=np.float64)
    for blk in bb.blocks:
        blk.conv1.weight.value[...] = 0
        blk.conv2.weight.value[...] = 0
    x = np.random.default_rng(3).standard_normal((1, 3, 64, 64))
    feat, _ = bb.forward(x, train=False)

    # independent composition: stem, pool, then per block ReLU or the
    # projected-and-normalized skip (residual branches contribute zero)
    h, _ = ops.conv2d_forward(x, bb.stem_conv.weight.value, 2, 3)
    h, _ = ops.batchnorm2d_forward(h, bb.stem_bn.gamma.value, bb.stem_bn.beta.value,
                                   bb.stem_bn.running_mean.copy(),
                                   bb.stem_bn.running_var.copy(), train=False)
    h = np.maximum(h, 0)
    h, _ = ops.maxpool2d_forward(h, 3, 2, 1)
    for blk in bb.blocks:
        if blk.proj is not None:
            h, _ = ops.conv2d_forward(h, blk.proj.weight.value, 2, 0)
            h, _ = ops.batchnorm2d_forward(h, blk.bn_proj.gamma.value,
                                           blk.bn_proj.beta.value,
                                           blk.bn_proj.running_mean.copy(),
                                           blk.bn_proj.running_var.copy(), train=False)
        h = np.maximum(h, 0)
    expected = h.mean(axis=(2, 3))
    assert np.allclose(feat, expected)


def test_resblock_grad_check():
    blk = ResBlock(np.random.default_rng(7), 2, 4, downsample=True, dtype=np.float64)
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 2, 6, 6))
    r = rng.standard_normal((2, 4, 3, 3))
    params = [p.value for _, p in blk.named_parameters()] + [x]

    def f():
        for _, p in blk.named_parameters():
            p.zero_grad()
        y, cache = blk.forward(x, train=True)
        dx = blk.backward(r, cache)
        grads = [p.grad.copy() for _, p in blk.named_parameters()] + [dx]
        return float((y * r).sum()), grads

    assert ops.grad_check(f, params, h=1e-5) < 1e-4


def test_frozen_flag_propagates():
    bb = build_backbone(BackboneConfig(), seed=9)
    bb.set_frozen(True)
    assert all(p.frozen for _, p in bb.named_parameters())
