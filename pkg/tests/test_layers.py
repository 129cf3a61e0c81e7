import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal

from octcodec import flops
from octcodec.layers import (GDN, Conv2d, ConvTranspose2d, MaskedConv2d, avg_pool2, causal_mask, conv2d,
                             conv_output_size, gdn, tconv2d, tconv_output_size, upsample_nearest2)
from octcodec.tensor import Tensor, gradcheck, no_grad


def _conv_oracle(x, w, stride, padding):
    """Direct correlation with scipy, one (image, out, in) triple at a time."""
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, o = x.shape[0], w.shape[0]
    full = np.stack([np.stack([sum(signal.correlate2d(xp[i, c], w[j, c], mode="valid") for c in range(x.shape[1]))
                               for j in range(o)]) for i in range(n)])
    return full[:, :, ::stride, ::stride]


@pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 2, 5), (2, 1, 3), (1, 0, 1)])
def test_conv2d_matches_direct_correlation(stride, padding, k, rng):
    x = rng.normal(size=(2, 3, 9, 8))
    w = rng.normal(size=(4, 3, k, k))
    ours = conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
    np.testing.assert_allclose(ours, _conv_oracle(x, w, stride, padding), rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("stride,k", [(1, 3), (2, 5), (2, 3)])
def test_conv2d_gradients(seed, stride, k, f64):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 3, 8, 8)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 3, k, k)), requires_grad=True)
    b = Tensor(rng.normal(size=4), requires_grad=True)
    proj = Tensor(rng.normal(size=(2, 4, 8 // stride, 8 // stride)))
    err = gradcheck(lambda: (conv2d(x, w, b, stride, k // 2) * proj).sum(), [x, w, b], eps=1e-6)
    assert err < 1e-5


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("stride,k", [(1, 3), (2, 5), (2, 3)])
def test_tconv2d_gradients(seed, stride, k, f64):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 5, k, k)), requires_grad=True)
    b = Tensor(rng.normal(size=5), requires_grad=True)
    op = stride - 1
    out_hw = tconv_output_size(4, k, stride, k // 2, op)
    proj = Tensor(rng.normal(size=(2, 5, out_hw, out_hw)))
    err = gradcheck(lambda: (tconv2d(x, w, b, stride, k // 2, op) * proj).sum(), [x, w, b], eps=1e-6)
    assert err < 1e-5


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([1, 2]), st.sampled_from([1, 3, 5]), st.integers(3, 7))
def test_tconv_is_adjoint_of_conv(seed, stride, k, n):
    """<conv(x), y> == <x, tconv(y)> for the same kernel, padding and stride."""
    rng = np.random.default_rng(seed)
    pad = k // 2
    h = n * stride
    x = rng.normal(size=(1, 2, h, h))
    w = rng.normal(size=(3, 2, k, k))
    y_hw = conv_output_size(h, k, stride, pad)
    y = rng.normal(size=(1, 3, y_hw, y_hw))
    op = h - tconv_output_size(y_hw, k, stride, pad)
    lhs = np.vdot(conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).data, y)
    rhs = np.vdot(x, tconv2d(Tensor(y), Tensor(w), stride=stride, padding=pad, output_padding=op).data)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_stride_two_shapes_halve_and_double():
    conv = Conv2d(3, 4, 5, 2)
    tconv = ConvTranspose2d(4, 3, 5, 2)
    x = Tensor(np.zeros((1, 3, 16, 12), np.float32))
    y = conv(x)
    assert y.shape == (1, 4, 8, 6)
    assert tconv(y).shape == (1, 3, 16, 12)


def test_conv_channel_mismatch_raises():
    with pytest.raises(ValueError, match="channel"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_causal_mask_type_a_taps():
    m = causal_mask(5, 1, 1)[0, 0]
    assert m.sum() == 12
    assert m[2, 2] == 0 and m[2, 1] == 1 and m[3, 0] == 0


def test_masked_conv_output_ignores_current_and_future(rng):
    layer = MaskedConv2d(2, 3, 5, rng=0)
    x = rng.normal(size=(1, 2, 6, 6)).astype(np.float32)
    base = layer(Tensor(x)).data
    for r, c in [(2, 3), (0, 0), (5, 5)]:
        x2 = x.copy()
        x2[:, :, r, c] += 10.0
        diff = np.abs(layer(Tensor(x2)).data - base).sum(axis=(0, 1)) > 0
        rows, cols = np.nonzero(diff)
        # only strictly later raster positions may change
        assert all(rr * 6 + cc > r * 6 + c for rr, cc in zip(rows, cols))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_masked_conv_gradients_respect_mask(seed, f64):
    rng = np.random.default_rng(seed)
    layer = MaskedConv2d(2, 3, 5, rng=seed).astype(np.float64)
    x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
    proj = Tensor(rng.normal(size=(1, 3, 6, 6)))
    assert gradcheck(lambda: (layer(x) * proj).sum(), [x, layer.weight, layer.bias], eps=1e-6) < 1e-5
    assert np.all(layer.weight.grad[layer.mask == 0] == 0)


def _gdn_oracle(x, beta, gamma, inverse):
    norm = np.sqrt(beta[None, :, None, None] + np.einsum("ij,njhw->nihw", gamma, x * x))
    return x * norm if inverse else x / norm


@pytest.mark.parametrize("inverse", [False, True])
def test_gdn_matches_formula(inverse, rng):
    x = rng.normal(size=(2, 4, 3, 3))
    beta = rng.uniform(0.5, 1.5, 4)
    gamma = rng.uniform(0.0, 0.2, (4, 4))
    ours = gdn(Tensor(x), Tensor(beta), Tensor(gamma), inverse).data
    np.testing.assert_allclose(ours, _gdn_oracle(x, beta, gamma, inverse), rtol=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("inverse", [False, True])
def test_gdn_gradients(seed, inverse, f64):
    rng = np.random.default_rng(seed)
    layer = GDN(3, inverse=inverse)
    layer.gamma_raw.data += rng.uniform(0, 0.1, (3, 3))
    x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    proj = Tensor(rng.normal(size=(2, 3, 4, 4)))
    assert gradcheck(lambda: (layer(x) * proj).sum(), [x, layer.beta_raw, layer.gamma_raw], eps=1e-6) < 1e-5


def test_igdn_approximately_inverts_gdn_for_small_inputs(rng):
    g, ig = GDN(3), GDN(3, inverse=True)
    x = Tensor(rng.normal(scale=0.01, size=(1, 3, 4, 4)))
    np.testing.assert_allclose(ig(g(x)).data, x.data, rtol=1e-3, atol=1e-6)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_resampling_gradients(seed, f64):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(1, 2, 4, 6)), requires_grad=True)
    p1 = Tensor(rng.normal(size=(1, 2, 2, 3)))
    p2 = Tensor(rng.normal(size=(1, 2, 8, 12)))
    assert gradcheck(lambda: (avg_pool2(x) * p1).sum() + (upsample_nearest2(x) * p2).sum(), [x], eps=1e-6) < 1e-5


def test_flop_counter_counts_conv_macs():
    x = Tensor(np.zeros((1, 3, 16, 16), np.float32))
    w = Tensor(np.zeros((8, 3, 5, 5), np.float32))
    with flops.counting() as c:
        conv2d(x, w, stride=2, padding=2)
    assert c.total() == 8 * 8 * 8 * 3 * 25


def test_dry_run_returns_shapes_without_arithmetic():
    x = Tensor(np.ones((1, 3, 16, 16), np.float32))
    w = Tensor(np.ones((8, 3, 5, 5), np.float32))
    with no_grad(), flops.counting(dry_run=True):
        y = conv2d(x, w, stride=2, padding=2)
    assert y.shape == (1, 8, 8, 8) and not y.data.any()
