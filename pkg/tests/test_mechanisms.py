import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from symbiotic import mechanisms as M
from symbiotic import tensor as T
from symbiotic.errors import ConfigError, ShapeError
from symbiotic.layers import BatchNormParams, conv2d, global_avg_pool, make_conv
from symbiotic.tensor import Tensor

import oracles


def soft_masks(rng, shape):
    m = rng.random(shape) + 0.05
    return m / m.sum(axis=1, keepdims=True)


# -- region pooling ---------------------------------------------------------


def test_region_pool_single_uniform_mask_is_global_average():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
    f = M.region_pool(Tensor(x), Tensor(np.ones((2, 1, 4, 4)))).data[:, 0]
    assert np.allclose(f, global_avg_pool(Tensor(x)).data, atol=1e-6)


def test_region_pool_piecewise_constant():
    x = np.array([[[[1.0, 1.0, 3.0, 3.0]]]])
    m = np.zeros((1, 2, 1, 4))
    m[0, 0, 0, :2] = 1
    m[0, 1, 0, 2:] = 1
    assert np.allclose(M.region_pool(Tensor(x), Tensor(m)).data[0, :, 0], [1.0, 3.0], atol=1e-6)


def test_region_pool_soft_mask_hand_value():
    x = np.array([[[[4.0, 8.0]]]])
    m = np.array([[[[0.25, 0.75]]]])
    got = M.region_pool(Tensor(x), Tensor(m)).item()
    assert got == pytest.approx(7.0 / (1 + 1e-6), abs=1e-12)


def test_region_pool_spatial_mismatch():
    with pytest.raises(ShapeError):
        M.region_pool(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_partition_of_unity_recovers_global_average(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 5, 4))
    m = soft_masks(rng, (2, 4, 5, 4))
    f = M.region_pool(Tensor(x), Tensor(m)).data
    area = m.sum(axis=(2, 3))
    recovered = (f * (area + 1e-6)[:, :, None]).sum(axis=1) / area.sum(axis=1)[:, None]
    assert np.allclose(recovered, x.mean(axis=(2, 3)), atol=1e-9)


# -- ssp head ---------------------------------------------------------------


def ssp_params(w_rec, b_rec, w_loc, b_loc):
    return M.SspHeadParams(*(Tensor(np.asarray(v, float)) for v in (w_rec, b_rec, w_loc, b_loc)))


def test_ssp_single_region():
    rng = np.random.default_rng(1)
    f = rng.normal(size=(2, 1, 3))
    p = M.SspHeadParams.create(rng, 3, 4)
    out = M.ssp_head(Tensor(f), p)
    assert np.all(out.region_weights.data == 1.0)
    assert np.allclose(out.logits.data, f[:, 0] @ p.w_rec.data.T + p.b_rec.data, atol=1e-14)


def test_ssp_equal_localization_averages_recognition():
    rng = np.random.default_rng(2)
    f = rng.normal(size=(1, 3, 2))
    p = ssp_params(rng.normal(size=(2, 2)), np.zeros(2), np.zeros((2, 2)), np.zeros(2))
    got = M.ssp_head(Tensor(f), p).logits.data
    assert np.allclose(got, (f[0] @ p.w_rec.data.T).mean(axis=0), atol=1e-14)


def test_ssp_hand_example():
    out = M.ssp_head(Tensor(np.array([[[2.0], [4.0]]])), ssp_params([[1.0]], [0.0], [[1.0]], [0.0]))
    w = out.region_weights.data[0, 0]
    assert np.round(w, 4).tolist() == [0.1192, 0.8808]
    assert round(out.logits.item(), 4) == 3.7616


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-20, 20))
def test_ssp_weights_normalized_and_shift_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(2, 3, 4))
    p = M.SspHeadParams.create(rng, 4, 2)
    out = M.ssp_head(Tensor(f), p)
    assert np.all(np.abs(out.region_weights.data.sum(axis=2) - 1) <= 1e-12)
    p.b_loc.data = p.b_loc.data + np.array([shift, 0.0])
    shifted = M.ssp_head(Tensor(f), p).logits.data
    assert np.allclose(shifted, out.logits.data, atol=1e-12)


# -- ssg --------------------------------------------------------------------


def test_ssg_zero_input_only_bias_pathway():
    rng = np.random.default_rng(3)
    p = M.SsgParams(make_conv(rng, 6, 2, 1), BatchNormParams.create(6))
    p.post_bn.beta.data = rng.normal(size=6)
    p.gate_conv.bias.data = rng.normal(size=2)
    out = M.ssg_layer(Tensor(np.zeros((2, 3, 4, 4))), Tensor(soft_masks(rng, (2, 2, 4, 4))), p).data
    expect = np.einsum("oc,c->o", p.gate_conv.weight.data[:, :, 0, 0], p.post_bn.beta.data) + p.gate_conv.bias.data
    assert np.allclose(out, expect[None, :, None, None], atol=1e-12)


def test_ssg_indicator_masks_keep_regions_apart():
    x = np.zeros((1, 1, 2, 2))
    x[0, 0, 0, 0] = 1000.0
    m = np.zeros((1, 2, 2, 2))
    m[0, 0, 0, 0] = 1
    m[0, 1] = 1 - m[0, 0]
    copies = M.gate_copies(Tensor(x), M.normalize_masks(Tensor(m))).data
    assert np.all(copies[0, 1] == 0.0)
    assert copies[0, 0, 0, 0] > 999


def test_ssg_empty_region_gives_zero_copy():
    x = np.ones((1, 2, 3, 3))
    m = np.zeros((1, 2, 3, 3))
    m[0, 0] = 1
    copies = M.gate_copies(Tensor(x), M.normalize_masks(Tensor(m))).data
    assert np.all(copies[0, 2:] == 0.0)


def test_ssg_rejects_non_pointwise_gate():
    p = M.SsgParams(make_conv(np.random.default_rng(0), 2, 2, 3), BatchNormParams.create(2))
    with pytest.raises(ShapeError):
        M.ssg_layer(Tensor(np.ones((2, 2, 4, 4))), Tensor(np.ones((2, 1, 4, 4))), p)


def test_ssg_forward_matches_oracle():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 6, 6))
    m = soft_masks(rng, (2, 2, 6, 6))
    p = M.SsgParams(make_conv(rng, 6, 4, 1), BatchNormParams.create(6))
    p.post_bn.gamma.data = rng.normal(1, 0.2, size=6)
    p.post_bn.beta.data = rng.normal(size=6)
    p.gate_conv.bias.data = rng.normal(size=4)
    got = M.ssg_layer(Tensor(x), Tensor(m), p, 2, 2).data
    want = oracles.ssg_layer(
        x, m, p.post_bn.gamma.data, p.post_bn.beta.data, p.gate_conv.weight.data, p.gate_conv.bias.data, 2, 2
    )
    assert np.allclose(got, want, atol=1e-9)


# -- sa ---------------------------------------------------------------------


@pytest.mark.parametrize("kind", [M.SPATIAL_SOFTMAX, M.CHANNEL_SIGMOID])
def test_zero_init_embedding_is_exactly_one(kind):
    src = np.random.default_rng(5).normal(size=(2, 3, 4, 5))
    p = M.SaEmbedParams.create(3, 6, 3, kind)
    assert p.phi.bias is None
    out = M.sa_embed(Tensor(src), p).data
    assert out.shape == (2, 6, 4, 5)
    assert np.all(out == 1.0)


def test_embedding_kernel_size_validated():
    with pytest.raises(ConfigError):
        M.SaEmbedParams.create(3, 4, 2)


def test_spatial_softmax_concentrates_on_hot_pixel():
    H, W = 3, 4
    hot = np.zeros((1, 1, H, W))
    hot[0, 0, 1, 2] = 1.0
    p = M.SaEmbedParams.create(1, 1, 1, M.SPATIAL_SOFTMAX)
    p.phi.weight.data = np.ones((1, 1, 1, 1))
    p.pre_bn.training = False
    p.pre_bn.eps = 0.0  # identity normalization: running mean 0, var 1
    out = M.sa_embed(Tensor(hot), p).data[0, 0]
    n = H * W
    assert out[1, 2] == pytest.approx(n * math.e / (math.e + n - 1), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_spatial_softmax_mean_one_positive(seed):
    y = np.random.default_rng(seed).normal(0, 5, size=(2, 3, 4, 4))
    out = M.spatial_softmax_scaled(Tensor(y)).data
    assert np.all(out > 0)
    assert np.allclose(out.mean(axis=(2, 3)), 1.0, atol=1e-9)


@pytest.mark.parametrize("kind,k", [(M.SPATIAL_SOFTMAX, 3), (M.CHANNEL_SIGMOID, 1)])
def test_sa_embed_matches_oracle(kind, k):
    rng = np.random.default_rng(6)
    src = rng.normal(size=(2, 3, 5, 5))
    p = M.SaEmbedParams.create(3, 4, k, kind)
    p.phi.weight.data = rng.normal(size=p.phi.weight.shape)
    p.pre_bn.gamma.data = rng.normal(1, 0.2, size=3)
    got = M.sa_embed(Tensor(src), p).data
    want = oracles.sa_embed(src, p.pre_bn.gamma.data, p.pre_bn.beta.data, p.phi.weight.data, kind)
    assert np.allclose(got, want, atol=1e-9)


def test_sa_augment_examples():
    x = np.random.default_rng(7).normal(size=(1, 2, 3, 3))
    assert np.array_equal(M.sa_augment(Tensor(x), Tensor(np.ones_like(x))).data, x)
    assert np.all(M.sa_augment(Tensor(x), Tensor(np.zeros_like(x))).data == 0.0)
    assert M.sa_augment(Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(np.full((1, 1, 1, 1), 1.5))).item() == 3.0
    with pytest.raises(ShapeError):
        M.sa_augment(Tensor(x), Tensor(np.ones((1, 2, 3, 2))))


def test_sa_forward_zero_init_equals_stage_one():
    rng = np.random.default_rng(8)
    xa, xs = Tensor(rng.normal(size=(2, 4, 3, 3))), Tensor(rng.normal(size=(2, 5, 3, 3)))
    conv = make_conv(rng, 5, 3, 1)
    w1 = Tensor(rng.normal(size=(2, 4)))
    out = M.sa_forward(
        xa,
        xs,
        lambda f: conv2d(f, conv),
        lambda v: T.matmul(v, T.transpose(w1)),
        lambda v: T.matmul(v, T.transpose(w1)),
        M.SaEmbedParams.create(3, 4),
        M.SaEmbedParams.create(2, 5, 1, M.CHANNEL_SIGMOID),
    )
    assert np.array_equal(out.seg_logits.data, out.seg_logits_stage1.data)
    assert np.array_equal(out.attr_logits.data, out.attr_logits_stage1.data)


# -- naive concat -----------------------------------------------------------


def test_naive_concat_channels():
    rng = np.random.default_rng(9)
    img = rng.normal(size=(2, 3, 4, 4))
    out = M.naive_concat_input(Tensor(img), Tensor(soft_masks(rng, (2, 7, 4, 4))), BatchNormParams.create(10))
    assert out.shape[1] == 10
    bn = BatchNormParams.create(5)
    bn.beta.data = np.arange(5.0)
    out = M.naive_concat_input(Tensor(img), Tensor(np.zeros((2, 2, 4, 4))), bn).data
    assert np.all(out[:, 3] == 3.0) and np.all(out[:, 4] == 4.0)


# -- footprint and inspection -----------------------------------------------


def test_footprint_formulas():
    assert M.footprint("ssp", 1, 1, 1, 1, 1) == 2
    assert M.footprint("sa", 1, 1, 1, 1, 1) == 2
    assert M.footprint("ssp", 11, 40, 512, 14, 14) == 1_104_312
    assert M.footprint("sa", 11, 40, 512, 14, 14) == 9_996
    assert M.footprint("sa", 3, 4, 1, 5, 6) == M.footprint("sa", 3, 4, 4096, 5, 6)
    with pytest.raises(ConfigError):
        M.footprint("sa", 0, 1, 1, 1, 1)


def test_footprint_ratio_linear_in_channels():
    ratios = [M.footprint("ssp", 3, 4, c, 5, 5) / M.footprint("sa", 3, 4, c, 5, 5) for c in (8, 16, 32)]
    assert ratios[2] - ratios[1] == pytest.approx(2 * (ratios[1] - ratios[0]), rel=1e-12)


def test_inspect_phi_examples():
    assert np.all(M.inspect_phi(np.zeros((4, 3, 3, 3))) == 0.5)
    assert M.inspect_phi(np.array([[1.0, 3.0]])[:, :, None, None]).tolist() == [[0.0, 1.0]]
    k = np.arange(9.0).reshape(1, 1, 3, 3)
    assert k.mean(axis=(2, 3))[0, 0] == 4.0
    assert M.inspect_phi(np.concatenate([k, 2 * k], axis=1)).tolist() == [[0.0, 1.0]]


def test_phi_csv_layout():
    text = M.phi_csv(np.array([[0.0, 1.0], [0.5, 0.25]]), ["a", "b"])
    assert text.splitlines() == ["a,b", "0.000000,1.000000", "0.500000,0.250000"]

