import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnconv import ops
from attnconv.cbam import CbamParams, cbam_forward, channel_attention_weights, spatial_attention_map
from attnconv.tensor import ShapeError, Tensor


def params(c, r=2, k=3, seed=0):
    return CbamParams.init(c, reduction=r, kernel=k, rng=np.random.default_rng(seed), dtype=np.float64)


@st.composite
def feature_maps(draw):
    seed = draw(st.integers(0, 2**31 - 1))
    r = draw(st.sampled_from([1, 2, 4]))
    c = r * draw(st.integers(1, 4))
    h, w = draw(st.integers(1, 6)), draw(st.integers(1, 6))
    k = draw(st.sampled_from([1, 3, 5, 7]))
    g = np.random.default_rng(seed)
    f = g.standard_normal((draw(st.integers(1, 3)), c, h, w)) * draw(st.sampled_from([0.1, 1.0, 5.0]))
    return f, params(c, r, k, seed), g


def test_zero_input_channel_weights_are_half():
    w = channel_attention_weights(Tensor(np.zeros((2, 8, 3, 3))), params(8))
    np.testing.assert_array_equal(w.data, 0.5)


def test_identity_mlp_weights():
    p = params(2, r=1)
    p.mlp_w1.data[...] = np.eye(2)
    p.mlp_w2.data[...] = np.eye(2)
    f = np.stack([np.zeros((3, 3)), np.ones((3, 3))])[None]
    w = channel_attention_weights(Tensor(f), p).data[0]
    np.testing.assert_allclose(w, [0.5, 1 / (1 + np.exp(-2.0))], atol=1e-12)
    assert np.round(w, 4).tolist() == [0.5, 0.8808]


def test_spatial_map_zero_input():
    m = spatial_attention_map(Tensor(np.zeros((1, 4, 5, 5))), params(4))
    assert m.shape == (1, 1, 5, 5)
    np.testing.assert_array_equal(m.data, 0.5)


def test_spatial_map_constant_with_zero_kernel(rng):
    p = params(4)
    p.spatial_kernel.data[...] = 0.0
    p.spatial_bias.data[...] = 0.7
    m = spatial_attention_map(Tensor(rng.standard_normal((2, 4, 5, 5))), p)
    np.testing.assert_allclose(m.data, 1 / (1 + np.exp(-0.7)), atol=1e-12)


def test_spatial_map_recomposition(rng):
    p = params(6, k=7)
    f = Tensor(rng.standard_normal((2, 6, 9, 9)))
    pooled = np.concatenate([ops.pool_across_channels(f, "avg").data, ops.pool_across_channels(f, "max").data], 1)
    conv = ops.conv2d(Tensor(pooled), p.spatial_kernel, p.spatial_bias, padding=3).data
    expected = ops.sigmoid(Tensor(conv)).data
    np.testing.assert_allclose(spatial_attention_map(f, p).data, expected, atol=1e-12)


def test_zero_input_zero_output():
    out = cbam_forward(Tensor(np.zeros((1, 8, 4, 4))), params(8))
    np.testing.assert_array_equal(out.data, 0.0)


def test_headline_shape():
    p = CbamParams.init(2560, rng=np.random.default_rng(0))
    f = Tensor(np.random.default_rng(1).standard_normal((1, 2560, 8, 8)).astype(np.float32))
    assert cbam_forward(f, p).shape == (1, 2560, 8, 8)


def test_default_hyperparameters():
    p = CbamParams.init(64)
    assert p.reduction == 16 and p.kernel == 7
    assert p.mlp_w1.shape == (64, 4) and p.spatial_kernel.shape == (1, 2, 7, 7)


@pytest.mark.parametrize("c,r,k", [(10, 4, 7), (16, 16, 4), (8, 0, 3)])
def test_construction_rejects(c, r, k):
    with pytest.raises(ShapeError):
        CbamParams.init(c, r, k)


def test_channel_mismatch_rejected():
    with pytest.raises(ShapeError, match="C=4"):
        cbam_forward(Tensor(np.zeros((1, 4, 2, 2))), params(8))


def test_spatial_map_sees_channel_refined_features(rng):
    # Scaling a channel by its weight changes the channel-max, so computing the
    # spatial map on the raw input gives a different result.
    p = params(4, k=3)
    f = Tensor(rng.standard_normal((1, 4, 5, 5)))
    out, w, m = cbam_forward(f, p, return_maps=True)
    refined = f.data * w.data[:, :, None, None]
    np.testing.assert_allclose(m.data, spatial_attention_map(Tensor(refined), p).data, atol=1e-12)
    assert not np.allclose(m.data, spatial_attention_map(f, p).data)


# -- invariants over randomized inputs --------------------------------------------


@settings(max_examples=120, deadline=None)
@given(feature_maps())
def test_shape_and_ranges(case):
    f, p, _ = case
    out, w, m = cbam_forward(Tensor(f), p, return_maps=True)
    n, c, h, wd = f.shape
    assert out.shape == f.shape and w.shape == (n, c) and m.shape == (n, 1, h, wd)
    assert np.all((w.data > 0) & (w.data < 1))
    assert np.all((m.data > 0) & (m.data < 1))


@settings(max_examples=120, deadline=None)
@given(feature_maps())
def test_factorization(case):
    f, p, _ = case
    out, w, m = cbam_forward(Tensor(f), p, return_maps=True)
    np.testing.assert_allclose(out.data, w.data[:, :, None, None] * m.data * f, atol=1e-6, rtol=0)
    nz = f != 0
    ratio = out.data[nz] / f[nz]
    np.testing.assert_allclose(ratio, np.broadcast_to(w.data[:, :, None, None] * m.data, f.shape)[nz], atol=1e-6)


@settings(max_examples=120, deadline=None)
@given(feature_maps())
def test_channel_weights_spatial_permutation_invariant(case):
    f, p, g = case
    n, c, h, w = f.shape
    perm = g.permutation(h * w)
    fp = f.reshape(n, c, h * w)[:, :, perm].reshape(n, c, h, w)
    np.testing.assert_allclose(channel_attention_weights(Tensor(fp), p).data,
                               channel_attention_weights(Tensor(f), p).data, atol=1e-12)


@settings(max_examples=120, deadline=None)
@given(feature_maps())
def test_zero_in_zero_out_random_params(case):
    f, p, _ = case
    np.testing.assert_array_equal(cbam_forward(Tensor(np.zeros_like(f)), p).data, 0.0)


def test_gradients_reach_both_branches(rng):
    p = params(4)
    f = Tensor(rng.standard_normal((2, 4, 5, 5)), requires_grad=True)
    cbam_forward(f, p).sum().backward()
    for q in p.parameters():
        assert q.grad is not None and np.any(q.grad != 0), q.name
    assert f.grad.shape == f.shape
