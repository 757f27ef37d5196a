"""Forward kernels against naive-loop oracles; backwards against finite
differences of those oracles."""

import numpy as np
import pytest

from anomflow import kernels as K
from anomflow.errors import DimensionError

from oracles import (assert_grad_close, central_diff, naive_conv2d,
                     naive_dense, naive_global_avg_pool, naive_max_pool)

F32 = np.float32


def rand(rng, *shape, scale=1.0):
    return (rng.uniform(-scale, scale, size=shape)).astype(F32)


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_one_by_one_identity():
    rng = np.random.default_rng(0)
    x = rand(rng, 3, 6, 6, scale=10)
    kernel = np.zeros((3, 3, 1, 1), dtype=F32)
    for c in range(3):
        kernel[c, c, 0, 0] = 1.0
    spec = K.ConvSpec(3, 3, 1, 1)
    y = K.conv2d(x, kernel, np.zeros(3, dtype=F32), spec)
    np.testing.assert_array_equal(y, x)


def test_conv2d_shape_formula():
    rng = np.random.default_rng(1)
    x = rand(rng, 3, 8, 8)
    kernel = rand(rng, 4, 3, 3, 3)
    spec = K.ConvSpec(4, 3, 3, 3, stride=1, padding=1)
    y = K.conv2d(x, kernel, np.zeros(4, dtype=F32), spec)
    assert y.shape == (4, 8, 8)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_loop_oracle(stride, padding):
    rng = np.random.default_rng(2)
    x = rand(rng, 2, 5, 5, scale=2)
    kernel = rand(rng, 3, 2, 3, 3)
    bias = rand(rng, 3)
    spec = K.ConvSpec(3, 2, 3, 3, stride=stride, padding=padding)
    got = K.conv2d(x, kernel, bias, spec)
    want = naive_conv2d(x, kernel, bias, stride, padding)
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_conv2d_shape_mismatch_names_shapes():
    rng = np.random.default_rng(3)
    x = rand(rng, 2, 5, 5)
    kernel = rand(rng, 3, 4, 3, 3)  # wrong in_channels
    spec = K.ConvSpec(3, 2, 3, 3)
    with pytest.raises(DimensionError) as err:
        K.conv2d(x, kernel, np.zeros(3, dtype=F32), spec)
    assert "(2, 5, 5)" in str(err.value) and "(3, 4, 3, 3)" in str(err.value)


def test_conv2d_rejects_too_small_input():
    spec = K.ConvSpec(1, 1, 5, 5)
    with pytest.raises(DimensionError):
        spec.out_size(4, 4)


def test_conv2d_backward_matches_finite_differences():
    rng = np.random.default_rng(4)
    x = rand(rng, 2, 6, 6)
    kernel = rand(rng, 3, 2, 3, 3)
    bias = rand(rng, 3)
    spec = K.ConvSpec(3, 2, 3, 3, stride=2, padding=1)
    y, cache = K.conv2d_fwd(x[None], kernel, bias, spec)
    gy = rand(rng, *y.shape[1:])
    gx, gk, gb = K.conv2d_bwd(cache, gy[None])

    def loss(xx=None, kk=None, bb=None):
        out = naive_conv2d(xx if xx is not None else x,
                           kk if kk is not None else kernel,
                           bb if bb is not None else bias, 2, 1)
        return float((out * gy.astype(np.float64)).sum())

    assert_grad_close(gx[0], central_diff(lambda a: loss(xx=a), x))
    assert_grad_close(gk, central_diff(lambda a: loss(kk=a), kernel))
    assert_grad_close(gb, central_diff(lambda a: loss(bb=a), bias))


# ---------------------------------------------------------------------------
# dense


def test_dense_identity():
    x = np.array([1.5, -2.0, 3.0], dtype=F32)
    y = K.dense(x, np.eye(3, dtype=F32), np.zeros(3, dtype=F32))
    np.testing.assert_array_equal(y, x)


def test_dense_hand_case():
    w = np.array([[1, 2], [3, 4]], dtype=F32)
    y = K.dense(np.array([1, 1], dtype=F32), w, np.zeros(2, dtype=F32))
    np.testing.assert_array_equal(y, np.array([3, 7], dtype=F32))


def test_dense_matches_loop_oracle():
    rng = np.random.default_rng(5)
    x, w, b = rand(rng, 8), rand(rng, 8, 8), rand(rng, 8)
    np.testing.assert_allclose(K.dense(x, w, b), naive_dense(x, w, b),
                               atol=1e-6)


def test_dense_backward_matches_finite_differences():
    rng = np.random.default_rng(6)
    x, w, b = rand(rng, 5), rand(rng, 4, 5), rand(rng, 4)
    gy = rand(rng, 4)
    _, cache = K.dense_fwd(x[None], w, b)
    gx, gw, gb = K.dense_bwd(cache, gy[None])

    def loss(xx=None, ww=None, bb=None):
        out = naive_dense(xx if xx is not None else x,
                          ww if ww is not None else w,
                          bb if bb is not None else b)
        return float((out * gy.astype(np.float64)).sum())

    assert_grad_close(gx[0], central_diff(lambda a: loss(xx=a), x))
    assert_grad_close(gw, central_diff(lambda a: loss(ww=a), w))
    assert_grad_close(gb, central_diff(lambda a: loss(bb=a), b))


# ---------------------------------------------------------------------------
# elementwise


def test_sigmoid_zero():
    assert K.sigmoid(np.zeros(1, dtype=F32))[0] == 0.5


def test_sigmoid_symmetry():
    rng = np.random.default_rng(7)
    x = rand(rng, 64, scale=8)
    np.testing.assert_allclose(K.sigmoid(-x), 1.0 - K.sigmoid(x), atol=1e-6)


def test_elementwise_channel_broadcast_mul():
    x = np.ones((2, 2, 2), dtype=F32)
    gates = np.array([2.0, 0.5], dtype=F32)
    y = K.elementwise("mul", x, gates)
    assert (y[0] == 2.0).all() and (y[1] == 0.5).all()


def test_elementwise_spatial_broadcast_add():
    x = np.zeros((3, 2, 2), dtype=F32)
    m = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=F32)
    y = K.elementwise("add", x, m)
    for c in range(3):
        np.testing.assert_array_equal(y[c], m)


def test_elementwise_rejects_bad_broadcast():
    with pytest.raises(DimensionError):
        K.elementwise("mul", np.zeros((3, 2, 2), dtype=F32),
                      np.zeros(5, dtype=F32))


def test_activation_backwards_match_finite_differences():
    rng = np.random.default_rng(8)
    x = rand(rng, 6, scale=2) + 0.05  # keep clear of the relu kink
    gy = rand(rng, 6)

    for name, fwd, bwd, wants_y in [
            ("relu", K.relu, K.relu_bwd, False),
            ("sigmoid", K.sigmoid, K.sigmoid_bwd, True),
            ("tanh", K.tanh, K.tanh_bwd, True)]:
        ref = {"relu": lambda a: np.maximum(a, 0.0),
               "sigmoid": lambda a: 1.0 / (1.0 + np.exp(-a)),
               "tanh": np.tanh}[name]
        y = fwd(x)
        ga = bwd(y if wants_y else x, gy)
        gn = central_diff(
            lambda a: float((ref(a) * gy.astype(np.float64)).sum()), x)
        assert_grad_close(ga, gn)


# ---------------------------------------------------------------------------
# pooling


def test_max_pool_constant():
    x = np.full((2, 4, 4), 3.25, dtype=F32)
    y = K.max_pool(x, 2, 2)
    assert y.shape == (2, 2, 2)
    assert (y == 3.25).all()


def test_max_pool_hand_case():
    x = np.array([[[1, 2], [3, 4]]], dtype=F32)
    y = K.max_pool(x, 2, 2)
    np.testing.assert_array_equal(y, np.array([[[4]]], dtype=F32))


@pytest.mark.parametrize("window,stride", [(3, 2), (2, 2), (3, 1)])
def test_max_pool_matches_loop_oracle(window, stride):
    rng = np.random.default_rng(9)
    x = rand(rng, 3, 8, 8, scale=5)
    got = K.max_pool(x, window, stride)
    want = naive_max_pool(x, window, stride)
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_max_pool_backward_first_max_tie_break():
    # all-equal window: gradient must land on the first element row-major
    x = np.ones((1, 1, 2, 2), dtype=F32)
    y, cache = K.max_pool_fwd(x, 2, 2)
    gx = K.max_pool_bwd(cache, np.full((1, 1, 1, 1), 5.0, dtype=F32))
    np.testing.assert_array_equal(
        gx[0, 0], np.array([[5.0, 0.0], [0.0, 0.0]], dtype=F32))


@pytest.mark.parametrize("window,stride", [(2, 2), (3, 1)])
def test_max_pool_backward_matches_finite_differences(window, stride):
    rng = np.random.default_rng(10)
    x = rand(rng, 2, 6, 6, scale=3)
    y, cache = K.max_pool_fwd(x[None], window, stride)
    gy = rand(rng, *y.shape[1:])
    gx = K.max_pool_bwd(cache, gy[None])
    gn = central_diff(
        lambda a: float((naive_max_pool(a, window, stride)
                         * gy.astype(np.float64)).sum()), x)
    assert_grad_close(gx[0], gn)


def test_global_avg_pool_constant():
    x = np.full((4, 3, 3), -1.5, dtype=F32)
    np.testing.assert_allclose(K.global_avg_pool(x), np.full(4, -1.5), atol=0)


def test_global_avg_pool_hand_case():
    x = np.array([[[1, 3], [5, 7]]], dtype=F32)
    np.testing.assert_array_equal(K.global_avg_pool(x),
                                  np.array([4.0], dtype=F32))


def test_global_avg_pool_matches_sum_oracle():
    rng = np.random.default_rng(11)
    x = rand(rng, 4, 6, 6, scale=10)
    np.testing.assert_allclose(K.global_avg_pool(x),
                               naive_global_avg_pool(x), atol=1e-6)


def test_global_avg_pool_backward():
    rng = np.random.default_rng(12)
    x = rand(rng, 3, 4, 4)
    gy = rand(rng, 3)
    _, shape = K.global_avg_pool_fwd(x[None])
    gx = K.global_avg_pool_bwd(shape, gy[None])
    gn = central_diff(
        lambda a: float((naive_global_avg_pool(a)
                         * gy.astype(np.float64)).sum()), x)
    assert_grad_close(gx[0], gn)


# ---------------------------------------------------------------------------
# bilinear sampling


def test_resize_constant_is_exact():
    x = np.full((3, 5, 7), 0.7, dtype=F32)
    y = K.bilinear_resize(x, 11, 4)
    assert y.shape == (3, 11, 4)
    np.testing.assert_array_equal(y, np.full((3, 11, 4), 0.7, dtype=F32))


def test_resize_same_size_is_identity():
    rng = np.random.default_rng(13)
    x = rand(rng, 3, 6, 6)
    np.testing.assert_allclose(K.bilinear_resize(x, 6, 6), x, atol=1e-6)


def test_resize_matches_pointwise_oracle():
    rng = np.random.default_rng(14)
    x = rand(rng, 2, 5, 5)
    out_h, out_w = 8, 3
    got = K.bilinear_resize(x, out_h, out_w)
    xf = x.astype(np.float64)
    for c in range(2):
        for i in range(out_h):
            for j in range(out_w):
                sy = min(max((i + 0.5) * 5 / out_h - 0.5, 0.0), 4.0)
                sx = min(max((j + 0.5) * 5 / out_w - 0.5, 0.0), 4.0)
                y0, x0 = int(np.floor(sy)), int(np.floor(sx))
                y1, x1 = min(y0 + 1, 4), min(x0 + 1, 4)
                ty, tx = sy - y0, sx - x0
                top = xf[c, y0, x0] + tx * (xf[c, y0, x1] - xf[c, y0, x0])
                bot = xf[c, y1, x0] + tx * (xf[c, y1, x1] - xf[c, y1, x0])
                want = top + ty * (bot - top)
                assert abs(got[c, i, j] - want) < 1e-5


def test_rotate_zero_is_identity():
    rng = np.random.default_rng(15)
    x = rand(rng, 3, 9, 9)
    np.testing.assert_array_equal(K.rotate_image(x, 0.0), x)


def test_rotate_180_twice_recovers():
    rng = np.random.default_rng(16)
    x = rng.random((3, 8, 8), dtype=F32)
    twice = K.rotate_image(K.rotate_image(x, 180.0), 180.0)
    np.testing.assert_allclose(twice, x, atol=2e-3)
