import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brainseg import ops
from brainseg.gradcheck import grad_check


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def u(rng, *shape):
    return rng.uniform(-1, 1, size=shape)


# -- conv2d -----------------------------------------------------------------

def test_conv2d_box_sum():
    x = np.ones((1, 1, 3, 3))
    w = np.ones((1, 1, 3, 3))
    y, _ = ops.conv2d(x, w, np.zeros(1))
    np.testing.assert_array_equal(y[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv2d_zero_weight_gives_bias(rng):
    x = u(rng, 2, 3, 5, 4)
    y, _ = ops.conv2d(x, np.zeros((2, 3, 3, 3)), np.array([0.5, -2.0]))
    assert y.shape == (2, 2, 5, 4)
    np.testing.assert_array_equal(y[:, 0], 0.5)
    np.testing.assert_array_equal(y[:, 1], -2.0)


def test_conv2d_matches_naive_loop(rng):
    x, w, b = u(rng, 2, 2, 5, 6), u(rng, 3, 2, 3, 3), u(rng, 3)
    y, _ = ops.conv2d(x, w, b)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(y)
    for n in range(2):
        for k in range(3):
            for i in range(5):
                for j in range(6):
                    ref[n, k, i, j] = (xp[n, :, i:i + 3, j:j + 3] * w[k]).sum() + b[k]
    np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-12)


def test_conv2d_gradients(rng):
    rep = grad_check(ops.conv2d, ops.conv2d_backward,
                     [u(rng, 1, 2, 5, 5), u(rng, 3, 2, 3, 3), u(rng, 3)], name="conv2d")
    assert rep.passed, rep


def test_conv2d_linearity(rng):
    x, w = u(rng, 1, 2, 6, 6), u(rng, 3, 2, 3, 3)
    zero = np.zeros(3)
    np.testing.assert_allclose(ops.conv2d(2.5 * x, w, zero)[0], 2.5 * ops.conv2d(x, w, zero)[0],
                               rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("w_shape, msg", [((3, 4, 3, 3), "channels"), ((3, 2, 5, 5), "3x3")])
def test_conv2d_shape_errors(rng, w_shape, msg):
    with pytest.raises(ops.ShapeError, match=msg):
        ops.conv2d(u(rng, 1, 2, 4, 4), u(rng, *w_shape), np.zeros(3))


# -- conv1x1 ----------------------------------------------------------------

def test_conv1x1_scalar():
    y, _ = ops.conv1x1(np.full((1, 1, 2, 2), 3.0), np.array([[[[2.0]]]]), np.array([1.0]))
    np.testing.assert_array_equal(y, 7.0)


def test_conv1x1_identity(rng):
    x = u(rng, 2, 3, 4, 4)
    y, _ = ops.conv1x1(x, np.eye(3)[:, :, None, None], np.zeros(3))
    np.testing.assert_array_equal(y, x)


def test_conv1x1_gradients(rng):
    rep = grad_check(ops.conv1x1, ops.conv1x1_backward,
                     [u(rng, 2, 3, 4, 4), u(rng, 4, 3, 1, 1), u(rng, 4)], name="conv1x1")
    assert rep.passed, rep


def test_conv1x1_channel_mismatch(rng):
    with pytest.raises(ops.ShapeError, match="channels"):
        ops.conv1x1(u(rng, 1, 2, 4, 4), u(rng, 3, 5, 1, 1), np.zeros(3))


# -- relu -------------------------------------------------------------------

def test_relu_values():
    y, _ = ops.relu(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(y, [0, 0, 2])


def test_relu_all_negative():
    x = -np.abs(np.arange(1.0, 7.0)).reshape(2, 3)
    y, mask = ops.relu(x)
    assert not y.any()
    assert not ops.relu_backward(np.ones_like(x), mask).any()


def test_relu_gradient_off_kink(rng):
    x = u(rng, 2, 3, 4, 4)
    x[np.abs(x) < 0.05] = 0.5
    rep = grad_check(ops.relu, ops.relu_backward, [x], name="relu")
    assert rep.passed, rep


# -- maxpool ----------------------------------------------------------------

def test_maxpool_small():
    y, _ = ops.maxpool2(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    np.testing.assert_array_equal(y, [[[[4.0]]]])


def test_maxpool_constant():
    y, _ = ops.maxpool2(np.full((1, 2, 6, 4), 1.5))
    assert y.shape == (1, 2, 3, 2)
    np.testing.assert_array_equal(y, 1.5)


def test_maxpool_routing(rng):
    x = u(rng, 1, 1, 8, 8)
    y, cache = ops.maxpool2(x)
    g = u(rng, *y.shape)
    dx = ops.maxpool2_backward(g, cache)
    win = dx.reshape(4, 2, 4, 2).transpose(0, 2, 1, 3).reshape(4, 4, 4)
    assert ((win != 0).sum(axis=-1) == 1).all()
    np.testing.assert_allclose(win.sum(axis=-1), g[0, 0], rtol=0, atol=0)
    # the routed cell is the window maximum
    xw = x.reshape(4, 2, 4, 2).transpose(0, 2, 1, 3).reshape(4, 4, 4)
    assert (np.argmax(np.abs(win), axis=-1) == np.argmax(xw, axis=-1)).all()


def test_maxpool_gradients(rng):
    rep = grad_check(ops.maxpool2, ops.maxpool2_backward, [u(rng, 2, 2, 6, 6)], name="maxpool2")
    assert rep.passed, rep


def test_maxpool_odd_rejected():
    with pytest.raises(ops.ShapeError, match="even"):
        ops.maxpool2(np.zeros((1, 1, 5, 4)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 3), st.integers(1, 4))
def test_maxpool_conserves_gradient_mass(seed, c, half):
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, c, 2 * half, 2 * half))
    y, cache = ops.maxpool2(x)
    g = r.standard_normal(y.shape)
    assert np.isclose(ops.maxpool2_backward(g, cache).sum(), g.sum(), rtol=1e-12, atol=1e-12)


# -- upconv -----------------------------------------------------------------

def test_upconv_paints_kernel():
    y, _ = ops.upconv2(np.array([[[[3.0]]]]), np.array([[[[1.0, 2.0], [3.0, 4.0]]]]),
                       np.zeros(1))
    np.testing.assert_array_equal(y[0, 0], [[3, 6], [9, 12]])


def test_upconv_ones():
    y, _ = ops.upconv2(np.ones((1, 1, 1, 1)), np.ones((1, 1, 2, 2)), np.zeros(1))
    np.testing.assert_array_equal(y, np.ones((1, 1, 2, 2)))


def test_upconv_matches_naive(rng):
    x, w, b = u(rng, 2, 3, 3, 2), u(rng, 3, 2, 2, 2), u(rng, 2)
    y, _ = ops.upconv2(x, w, b)
    ref = np.zeros((2, 2, 6, 4))
    for n in range(2):
        for c in range(3):
            for h in range(3):
                for v in range(2):
                    ref[n, :, 2 * h:2 * h + 2, 2 * v:2 * v + 2] += x[n, c, h, v] * w[c]
    ref += b[None, :, None, None]
    np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-12)


def test_upconv_gradients(rng):
    rep = grad_check(ops.upconv2, ops.upconv2_backward,
                     [u(rng, 2, 3, 3, 3), u(rng, 3, 2, 2, 2), u(rng, 2)], name="upconv2")
    assert rep.passed, rep


def test_upconv_mismatch(rng):
    with pytest.raises(ops.ShapeError, match="channels"):
        ops.upconv2(u(rng, 1, 2, 2, 2), u(rng, 3, 2, 2, 2), np.zeros(2))


# -- concat -----------------------------------------------------------------

def test_concat_shape_and_round_trip(rng):
    a, b = u(rng, 1, 2, 4, 4), u(rng, 1, 3, 4, 4)
    y, split = ops.concat_channels(a, b)
    assert y.shape == (1, 5, 4, 4)
    ra, rb = ops.concat_channels_backward(y, split)
    assert np.array_equal(ra, a) and np.array_equal(rb, b)


def test_concat_empty_second_is_identity(rng):
    a = u(rng, 2, 3, 4, 4)
    y, _ = ops.concat_channels(a, np.zeros((2, 0, 4, 4)))
    assert np.array_equal(y, a)


def test_concat_spatial_mismatch(rng):
    with pytest.raises(ops.ShapeError, match="height"):
        ops.concat_channels(u(rng, 1, 2, 4, 4), u(rng, 1, 2, 2, 4))


def test_concat_gradients(rng):
    rep = grad_check(ops.concat_channels, ops.concat_channels_backward,
                     [u(rng, 1, 2, 3, 3), u(rng, 1, 3, 3, 3)], name="concat")
    assert rep.passed, rep


# -- softmax ----------------------------------------------------------------

def test_softmax_equal_logits():
    p, _ = ops.softmax_channels(np.zeros((1, 4, 2, 2)))
    np.testing.assert_array_equal(p, 0.25)


def test_softmax_large_logit_stable():
    x = np.zeros((1, 4, 1, 1))
    x[0, 0] = 1000.0
    p, _ = ops.softmax_channels(x)
    assert np.all(np.isfinite(p))
    assert p[0, 0, 0, 0] == pytest.approx(1.0)
    assert p[0, 1:].max() < 1e-300


def test_softmax_gradients(rng):
    rep = grad_check(ops.softmax_channels, ops.softmax_channels_backward,
                     [u(rng, 2, 4, 3, 3)], name="softmax")
    assert rep.passed, rep


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 50))
def test_softmax_sums_to_one(seed, scale):
    x = np.random.default_rng(seed).standard_normal((2, 4, 3, 3)) * scale
    p, _ = ops.softmax_channels(x)
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-6
    assert p.min() >= 0 and p.max() <= 1


# -- float32 path and determinism -------------------------------------------

def test_float32_is_preserved(rng):
    x = u(rng, 1, 2, 4, 4).astype(np.float32)
    w = u(rng, 3, 2, 3, 3).astype(np.float32)
    y, cache = ops.conv2d(x, w, np.zeros(3, np.float32))
    assert y.dtype == np.float32
    assert all(g.dtype == np.float32 for g in ops.conv2d_backward(y, cache))
    assert ops.relu(y)[0].dtype == np.float32


def test_forward_is_deterministic(rng):
    x, w, b = u(rng, 2, 3, 8, 8), u(rng, 4, 3, 3, 3), u(rng, 4)
    assert np.array_equal(ops.conv2d(x, w, b)[0], ops.conv2d(x.copy(), w.copy(), b.copy())[0])
