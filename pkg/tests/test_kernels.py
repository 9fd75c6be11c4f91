import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from defyolo.kernels import (batchnorm2d, bilinear_sample, concat_channels, conv2d,
                             deform_conv2d, maxpool2d, out_size, sigmoid, silu,
                             softmax_channel, split_channels, upsample_nearest2x)
from defyolo.tensor import ShapeError, Tensor, grad_check

from conftest import SEEDS, t64


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    ho, wo = out_size(h, k, stride, pad), out_size(wd, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, co, ho, wo))
    for i in range(n):
        for o in range(co):
            for y in range(ho):
                for z in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for ci in range(c):
                        for ky in range(k):
                            for kx in range(k):
                                acc += xp[i, ci, y * stride + ky, z * stride + kx] * w[o, ci, ky, kx]
                    out[i, o, y, z] = acc
    return out


def naive_maxpool(x, k, stride, pad):
    n, c, h, w = x.shape
    ho, wo = out_size(h, k, stride, pad), out_size(w, k, stride, pad)
    out = np.full((n, c, ho, wo), -np.inf)
    for i in range(n):
        for ch in range(c):
            for y in range(ho):
                for z in range(wo):
                    for ky in range(k):
                        for kx in range(k):
                            r, q = y * stride + ky - pad, z * stride + kx - pad
                            if 0 <= r < h and 0 <= q < w:
                                out[i, ch, y, z] = max(out[i, ch, y, z], x[i, ch, r, q])
    return out


def bilinear_oracle(f, y, x):
    h, w = f.shape
    total = 0.0
    for r in range(int(np.floor(y)), int(np.floor(y)) + 2):
        for q in range(int(np.floor(x)), int(np.floor(x)) + 2):
            if 0 <= r < h and 0 <= q < w:
                total += max(0.0, 1 - abs(y - r)) * max(0.0, 1 - abs(x - q)) * f[r, q]
    return total


# ---- convolution -------------------------------------------------------

def test_conv_all_ones_interior_is_nine():
    x = t64(np.ones((1, 1, 5, 5)))
    out = conv2d(x, t64(np.ones((1, 1, 3, 3))), padding=1)
    assert out.data[0, 0, 2, 2] == 9.0
    assert out.data[0, 0, 0, 0] == 4.0


def test_conv_identity_1x1(rng):
    x = t64(rng.normal(size=(2, 3, 4, 5)))
    out = conv2d(x, t64(np.eye(3).reshape(3, 3, 1, 1)))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_matches_naive_on_50_shapes():
    rng = np.random.default_rng(7)
    for _ in range(50):
        n, c, co = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, k // 2 + 1))
        h, w = rng.integers(k, 9), rng.integers(k, 9)
        x = rng.normal(size=(n, c, h, w))
        wt = rng.normal(size=(co, c, k, k))
        b = rng.normal(size=co)
        out = conv2d(t64(x), t64(wt), t64(b.reshape(1, co, 1, 1)), stride, pad)
        np.testing.assert_allclose(out.data, naive_conv(x, wt, b, stride, pad), atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        conv2d(t64(np.ones((1, 2, 4, 4))), t64(np.ones((1, 3, 3, 3))))


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("stride", [1, 2])
def test_conv_grad(seed, stride):
    rng = np.random.default_rng(seed)
    x = t64(rng.normal(size=(2, 2, 5, 5)))
    w = t64(rng.normal(size=(3, 2, 3, 3)))
    b = t64(rng.normal(size=(1, 3, 1, 1)))
    r = t64(rng.normal(size=conv2d(x, w, b, stride, 1).shape))
    assert grad_check(lambda x, w, b: (conv2d(x, w, b, stride, 1) * r).sum(), [x, w, b]) < 1e-5


# ---- bilinear ----------------------------------------------------------

def test_bilinear_exact_at_integer():
    f = np.arange(20, dtype=float).reshape(4, 5)
    assert bilinear_sample(f, 2, 3)[0] == f[2, 3]


def test_bilinear_midpoint():
    f = np.arange(20, dtype=float).reshape(4, 5)
    assert bilinear_sample(f, 1.5, 2)[0] == pytest.approx((f[1, 2] + f[2, 2]) / 2, abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.floats(-1.5, 5.5), st.floats(-1.5, 6.5), st.integers(0, 1000))
def test_bilinear_matches_four_term_oracle(y, x, seed):
    f = np.random.default_rng(seed).normal(size=(5, 6))
    assert abs(bilinear_sample(f, y, x)[0] - bilinear_oracle(f, y, x)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 4), st.floats(0, 5), st.floats(-1, 1), st.floats(-1, 1), st.integers(0, 99))
def test_bilinear_lipschitz(y, x, dy, dx, seed):
    f = np.random.default_rng(seed).normal(size=(5, 6))
    a = bilinear_sample(f, y, x)[0]
    b = bilinear_sample(f, y + dy, x + dx)[0]
    assert abs(a - b) <= 2 * np.abs(f).max() * (abs(dy) + abs(dx)) + 1e-12


def test_bilinear_corner_weights_sum_to_one_inside():
    f = np.ones((4, 4))
    _, _, _, wts = bilinear_sample(f, 1.25, 2.6)
    assert sum(wts.values()) == pytest.approx(1.0)
    assert len(bilinear_sample(f, -0.5, 0.5)[3]) == 2


# ---- deformable convolution --------------------------------------------

def test_deform_zero_offset_is_conv(rng):
    x = t64(rng.normal(size=(2, 3, 7, 6)))
    w = t64(rng.normal(size=(4, 3, 3, 3)))
    b = t64(rng.normal(size=(1, 4, 1, 1)))
    for stride in (1, 2):
        ref = conv2d(x, w, b, stride, 1)
        off = t64(np.zeros((2, 18) + ref.shape[2:]))
        np.testing.assert_allclose(deform_conv2d(x, off, w, b, stride, 1).data, ref.data, atol=1e-13)


def test_deform_constant_offset_shifts_left(rng):
    x = rng.normal(size=(1, 2, 6, 6))
    w = t64(rng.normal(size=(3, 2, 3, 3)))
    off = np.zeros((1, 18, 6, 6))
    off[:, 1::2] = 1.0
    shifted = np.zeros_like(x)
    shifted[..., :-1] = x[..., 1:]
    out = deform_conv2d(t64(x), t64(off), w, None, 1, 1)
    ref = conv2d(t64(shifted), w, None, 1, 1)
    # column 0 differs: its left taps read real pixels instead of padding
    np.testing.assert_allclose(out.data[..., 1:], ref.data[..., 1:], atol=1e-13)


def test_deform_matches_bilinear_oracle(rng):
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(2, 2, 3, 3))
    off = rng.normal(scale=1.5, size=(1, 18, 5, 5))
    out = deform_conv2d(t64(x), t64(off), t64(w), None, 1, 1).data
    ref = np.zeros_like(out)
    for o in range(2):
        for i in range(5):
            for j in range(5):
                for n in range(9):
                    ky, kx = divmod(n, 3)
                    py = i - 1 + ky + off[0, 2 * n, i, j]
                    px = j - 1 + kx + off[0, 2 * n + 1, i, j]
                    for c in range(2):
                        ref[0, o, i, j] += w[o, c, ky, kx] * bilinear_oracle(x[0, c], py, px)
    np.testing.assert_allclose(out, ref, atol=1e-12)


@pytest.mark.parametrize("seed", SEEDS)
def test_deform_grad_small(seed):
    rng = np.random.default_rng(seed)
    x = t64(rng.normal(size=(1, 4, 6, 6)))
    w = t64(rng.normal(size=(2, 4, 3, 3)))
    # keep sampling points away from integer grid lines where bilinear is not smooth
    off = t64(rng.integers(-2, 3, size=(1, 18, 6, 6)) + rng.uniform(0.2, 0.8, size=(1, 18, 6, 6)))
    r = t64(rng.normal(size=(1, 2, 6, 6)))
    err = grad_check(lambda x, off, w: (deform_conv2d(x, off, w, None, 1, 1) * r).sum(),
                     [x, off, w])
    assert err < 1e-5


def test_deform_offset_shape_checked():
    with pytest.raises(ShapeError):
        deform_conv2d(t64(np.ones((1, 1, 4, 4))), t64(np.zeros((1, 9, 4, 4))),
                      t64(np.ones((1, 1, 3, 3))), None, 1, 1)


# ---- batch norm --------------------------------------------------------

def test_bn_inference_identity(rng):
    x = t64(rng.normal(size=(2, 3, 4, 4)))
    out = batchnorm2d(x, t64(np.ones((1, 3, 1, 1))), t64(np.zeros((1, 3, 1, 1))),
                      np.zeros(3), np.ones(3) - 1e-5, training=False)
    np.testing.assert_allclose(out.data, x.data, atol=1e-12)


def test_bn_training_normalizes(rng):
    x = t64(rng.normal(3.0, 2.0, size=(4, 3, 5, 5)))
    rm, rv = np.zeros(3), np.ones(3)
    out = batchnorm2d(x, t64(np.ones((1, 3, 1, 1))), t64(np.zeros((1, 3, 1, 1))), rm, rv, True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1, atol=1e-4)
    np.testing.assert_allclose(rm, 0.03 * x.data.mean(axis=(0, 2, 3)))


def test_bn_single_constant_batch_rejected():
    with pytest.raises(ValueError):
        batchnorm2d(t64(np.ones((1, 1, 2, 2))), t64(np.ones((1, 1, 1, 1))),
                    t64(np.zeros((1, 1, 1, 1))), np.zeros(1), np.ones(1), True)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("training", [True, False])
def test_bn_grad(seed, training):
    rng = np.random.default_rng(seed)
    x = t64(rng.normal(size=(2, 3, 4, 4)))
    g = t64(rng.normal(size=(1, 3, 1, 1)))
    b = t64(rng.normal(size=(1, 3, 1, 1)))
    r = t64(rng.normal(size=(2, 3, 4, 4)))
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2, size=3)

    def f(x, g, b):
        return (batchnorm2d(x, g, b, rm.copy(), rv.copy(), training) * r).sum()

    assert grad_check(f, [x, g, b]) < 1e-5


# ---- activations -------------------------------------------------------

def test_silu_derivative_at_zero():
    x = t64(np.zeros((1, 1, 1, 1)), True)
    silu(x).sum().backward()
    assert x.grad.item() == 0.5


def test_sigmoid_stable_for_large_inputs():
    out = sigmoid(t64(np.array([-1000.0, 0.0, 1000.0]).reshape(1, 3, 1, 1))).data.ravel()
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


def test_softmax_uniform_16_bins():
    p = softmax_channel(t64(np.zeros((1, 64, 2, 2))), bins=16).data
    np.testing.assert_allclose(p, 1 / 16)
    with pytest.raises(ShapeError):
        softmax_channel(t64(np.zeros((1, 10, 1, 1))), bins=16)


@pytest.mark.parametrize("seed", SEEDS)
def test_activation_grads(seed):
    rng = np.random.default_rng(seed)
    x = t64(rng.normal(size=(1, 32, 2, 2)) * 3)
    r = t64(rng.normal(size=x.shape))
    assert grad_check(lambda x: (silu(x) * r).sum(), [x]) < 1e-5
    assert grad_check(lambda x: (sigmoid(x) * r).sum(), [x]) < 1e-5
    assert grad_check(lambda x: (softmax_channel(x, 16) * r).sum(), [x]) < 1e-5


# ---- pooling, resampling, concat ---------------------------------------

def test_maxpool_constant():
    out = maxpool2d(t64(np.full((1, 2, 6, 6), 3.5)))
    np.testing.assert_array_equal(out.data, 3.5)


def test_maxpool_matches_naive():
    rng = np.random.default_rng(3)
    for _ in range(20):
        k = int(rng.choice([2, 3, 5]))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, k // 2 + 1))
        x = rng.integers(-3, 4, size=(2, 2, 7, 8)).astype(float)
        np.testing.assert_array_equal(maxpool2d(t64(x), k, stride, pad).data,
                                      naive_maxpool(x, k, stride, pad))


def test_maxpool_grad_mass_and_tie_rule():
    x = t64(np.zeros((1, 1, 3, 3)), True)
    maxpool2d(x, 3, 1, 0).sum().backward()
    assert x.grad[0, 0, 0, 0] == 1.0 and x.grad.sum() == 1.0
    rng = np.random.default_rng(0)
    y = t64(rng.integers(0, 3, size=(2, 3, 6, 6)).astype(float), True)
    out = maxpool2d(y, 5, 1, 2)
    out.sum().backward()
    assert y.grad.sum() == out.data.size


@pytest.mark.parametrize("seed", SEEDS)
def test_maxpool_grad(seed):
    rng = np.random.default_rng(seed)
    x = t64(rng.normal(size=(1, 2, 6, 6)))
    r = t64(rng.normal(size=(1, 2, 6, 6)))
    assert grad_check(lambda x: (maxpool2d(x) * r).sum(), [x]) < 1e-5


def test_upsample_and_concat(rng):
    x = t64(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    up = upsample_nearest2x(x).data[0, 0]
    np.testing.assert_array_equal(up, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
    a, b = t64(rng.normal(size=(2, 2, 3, 3))), t64(rng.normal(size=(2, 3, 3, 3)))
    cat = concat_channels([a, b])
    assert cat.shape == (2, 5, 3, 3)
    back = split_channels(cat, [2, 3])
    np.testing.assert_array_equal(back[0].data, a.data)
    np.testing.assert_array_equal(back[1].data, b.data)
    with pytest.raises(ShapeError):
        concat_channels([a, t64(np.ones((2, 1, 4, 3)))])


@pytest.mark.parametrize("seed", SEEDS)
def test_resample_grads(seed):
    rng = np.random.default_rng(seed)
    a, b = t64(rng.normal(size=(1, 2, 3, 3))), t64(rng.normal(size=(1, 3, 3, 3)))
    r = t64(rng.normal(size=(1, 5, 6, 6)))
    f = lambda a, b: (upsample_nearest2x(concat_channels([a, b])) * r).sum()
    assert grad_check(f, [a, b]) < 1e-5
    s = t64(rng.normal(size=(1, 2, 3, 3)))
    g = lambda c: (split_channels(c, [3, 2])[1] * s).sum()
    assert grad_check(g, [t64(rng.normal(size=(1, 5, 3, 3)))]) < 1e-5
