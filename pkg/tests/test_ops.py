import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from embanet import ops
from embanet.autodiff import ShapeMismatch

from strategies import seeds


def test_conv_1x1_scaling():
    out = ops.conv2d(np.full((1, 1, 3, 3), 3.0), np.full((1, 1, 1, 1), 2.0))
    assert np.all(out == 6.0)


def test_conv_window_sum():
    out = ops.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
    assert out.shape == (1, 1, 1, 1) and out.item() == 9.0


def test_grouped_conv_is_two_independent_convs(rng):
    x = rng.standard_normal((2, 4, 5, 5))
    w = rng.standard_normal((4, 2, 3, 3))
    out = ops.conv2d(x, w, padding=1, groups=2)
    a = ops.conv2d_reference(x[:, :2], w[:2], padding=1)
    b = ops.conv2d_reference(x[:, 2:], w[2:], padding=1)
    assert np.array_equal(out, np.concatenate([a, b], axis=1))


@pytest.mark.parametrize("h,k,s,p,expected", [(224, 7, 2, 3, 112), (56, 3, 2, 1, 28), (5, 3, 1, 0, 3), (7, 1, 2, 0, 4)])
def test_conv_output_size(h, k, s, p, expected):
    assert ops.conv_output_size(h, k, s, p) == expected


def test_conv_errors():
    with pytest.raises(ops.GroupMismatch):
        ops.conv2d(np.zeros((1, 6, 3, 3)), np.zeros((4, 2, 3, 3)), groups=4)
    with pytest.raises(ShapeMismatch):
        ops.conv2d(np.zeros((1, 4, 3, 3)), np.zeros((4, 3, 3, 3)))
    with pytest.raises(ShapeMismatch):
        ops.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 5, 5)))


@st.composite
def conv_case(draw):
    g = draw(st.sampled_from([1, 2, 3, 4]))
    cin, cout = g * draw(st.integers(1, 3)), g * draw(st.integers(1, 3))
    k = draw(st.sampled_from([1, 3, 5]))
    stride = draw(st.integers(1, 2))
    pad = draw(st.integers(0, k // 2))
    side = draw(st.integers(k, k + 4))
    bias = draw(st.booleans())
    return g, cin, cout, k, stride, pad, side, bias, draw(seeds)


@given(conv_case())
def test_fast_conv_matches_reference_bitwise(case):
    g, cin, cout, k, stride, pad, side, bias, seed = case
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, cin, side, side))
    w = rng.standard_normal((cout, cin // g, k, k))
    b = rng.standard_normal(cout) if bias else None
    fast = ops.conv2d(x, w, b, stride=stride, padding=pad, groups=g)
    ref = ops.conv2d_reference(x, w, b, stride=stride, padding=pad, groups=g)
    assert np.array_equal(fast, ref)


@given(conv_case(), st.floats(-3, 3), st.floats(-3, 3))
def test_conv_is_linear(case, a, b):
    g, cin, cout, k, stride, pad, side, _, seed = case
    rng = np.random.default_rng(seed)
    x1, x2 = rng.standard_normal((2, 1, cin, side, side))
    w = rng.standard_normal((cout, cin // g, k, k))
    f = lambda x: ops.conv2d(x, w, stride=stride, padding=pad, groups=g)
    lhs, rhs = f(a * x1 + b * x2), a * f(x1) + b * f(x2)
    assert np.allclose(lhs, rhs, rtol=1e-5, atol=1e-9 * (1 + np.abs(rhs).max()))


@given(seeds, st.sampled_from([1, 2, 4]))
def test_grouped_conv_float32_matches_slices(seed, g):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 4 * g, 5, 5)).astype(np.float32)
    w = rng.standard_normal((2 * g, 4, 3, 3)).astype(np.float32)
    out = ops.conv2d(x, w, padding=1, groups=g)
    parts = [ops.conv2d(x[:, 4 * i : 4 * i + 4], w[2 * i : 2 * i + 2], padding=1) for i in range(g)]
    assert np.allclose(out, np.concatenate(parts, axis=1), rtol=1e-6, atol=1e-6)


def test_gap_examples(rng):
    assert np.all(ops.global_avg_pool(np.full((2, 3, 4, 4), 1.5)) == 1.5)
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)
    assert ops.global_avg_pool(x).item() == 2.5
    x = rng.standard_normal((2, 3, 5, 4))
    loop = np.zeros((2, 3, 1, 1))
    for n in range(2):
        for c in range(3):
            loop[n, c] = sum(x[n, c, i, j] for i in range(5) for j in range(4)) / 20
    assert np.allclose(ops.global_avg_pool(x), loop, rtol=1e-6)


@given(seeds)
def test_gap_preserves_channel_mean(seed):
    x = np.random.default_rng(seed).standard_normal((2, 3, 4, 6))
    assert np.allclose(ops.global_avg_pool(x)[..., 0, 0], x.mean(axis=(2, 3)), rtol=1e-12, atol=1e-15)


def test_fc_examples(rng):
    x = rng.standard_normal((3, 4))
    assert np.array_equal(ops.fully_connected(x, np.eye(4), np.zeros(4)), x)
    b = np.array([1.0, -2.0])
    assert np.all(ops.fully_connected(x, np.zeros((2, 4)), b) == b)
    w = rng.standard_normal((5, 4))
    loop = np.array([[sum(x[n, j] * w[o, j] for j in range(4)) for o in range(5)] for n in range(3)])
    assert np.allclose(ops.fully_connected(x, w), loop, rtol=1e-6)
    with pytest.raises(ShapeMismatch):
        ops.fully_connected(x, np.zeros((2, 3)))


def test_activation_examples(rng):
    assert ops.relu(np.array([-1.0, 2.0])).tolist() == [0.0, 2.0]
    assert ops.sigmoid(np.array([0.0])).item() == 0.5
    x = rng.standard_normal(100) * 5
    assert np.abs(ops.sigmoid(x) + ops.sigmoid(-x) - 1).max() < 1e-6
    assert ops.relu6(np.array([-1.0, 3.0, 9.0])).tolist() == [0.0, 3.0, 6.0]
    with pytest.raises(ValueError):
        ops.activation(x, "gelu")


def test_softmax_examples():
    assert np.allclose(ops.softmax_axis(np.zeros(2)), [0.5, 0.5])
    assert np.allclose(ops.softmax_axis(np.array([np.log(3.0), 0.0])), [0.75, 0.25])
    big = ops.softmax_axis(np.array([1000.0, 1000.0]))
    assert np.allclose(big, [0.5, 0.5])


@given(seeds, st.integers(0, 2), st.floats(-50, 50))
def test_softmax_properties(seed, axis, shift):
    x = np.random.default_rng(seed).standard_normal((3, 4, 5)) * 3
    y = ops.softmax_axis(x, axis=axis)
    assert np.all((y > 0) & (y < 1))
    assert np.abs(y.sum(axis=axis) - 1).max() < 1e-6
    assert np.abs(ops.softmax_axis(x + shift, axis=axis) - y).max() < 1e-6


def test_batchnorm_infer_identity(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    out = ops.batchnorm(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), training=False, eps=0.0)
    assert np.array_equal(out, x)


def test_batchnorm_train_standardizes_and_updates(rng):
    x = rng.standard_normal((64, 2, 8, 8))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    gamma, beta = np.array([2.0, 0.5]), np.array([1.0, -1.0])
    rm, rv = np.zeros(2), np.ones(2)
    out = ops.batchnorm(x, gamma, beta, rm, rv, training=True)
    expected = gamma.reshape(1, -1, 1, 1) * x + beta.reshape(1, -1, 1, 1)
    assert np.allclose(out, expected, atol=1e-4)
    m = 64 * 64
    assert np.allclose(rm, 0.0, atol=1e-12)
    assert np.allclose(rv, 0.9 + 0.1 * m / (m - 1))


def test_batchnorm_infer_is_affine(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    args = (rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal(3), rng.uniform(0.5, 2, 3))
    f = lambda v: ops.batchnorm(v, *args, training=False)
    a, b = 2.5, -1.0
    # affine map: f(a x + b) = a f(x) + (1 - a) f(0) + b (f(1) - f(0))
    zero, one = f(np.zeros_like(x)), f(np.ones_like(x))
    assert np.allclose(f(a * x + b), a * f(x) + (1 - a) * zero + b * (one - zero))


def test_batchnorm_zero_variance_and_shapes():
    with pytest.raises(ops.ZeroVariance):
        ops.batchnorm(np.zeros((1, 2, 1, 1)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), training=True)
    ops.batchnorm(np.zeros((1, 2, 1, 1)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), training=False)
    with pytest.raises(ShapeMismatch):
        ops.batchnorm(np.zeros((2, 3, 2, 2)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), training=False)


def max_pool_loop(x, k, stride, pad):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    ho, wo = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
    out = np.empty((n, c, ho, wo))
    for i in range(ho):
        for j in range(wo):
            out[:, :, i, j] = xp[:, :, i * stride : i * stride + k, j * stride : j * stride + k].max(axis=(2, 3))
    return out


def test_max_pool_examples(rng):
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    assert ops.max_pool(x, k=2, stride=2).item() == 4.0
    assert np.all(ops.max_pool(np.full((1, 2, 6, 6), 7.0), k=3, stride=2, pad=1) == 7.0)
    x = rng.standard_normal((2, 3, 9, 7))
    assert np.array_equal(ops.max_pool(x, k=3, stride=2, pad=1), max_pool_loop(x, 3, 2, 1))
    with pytest.raises(ShapeMismatch):
        ops.max_pool(np.zeros((1, 1, 2, 2)), k=3, stride=1)
