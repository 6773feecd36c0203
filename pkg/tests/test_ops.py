"""Unit tests for the layer primitives and the gradient checker."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qnet import ops


def rand64(rng, *shape):
    return rng.standard_normal(shape)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    y, _ = ops.matmul_forward(np.eye(2), a)
    assert np.array_equal(y, a)


def test_matmul_hand_value():
    # hand evaluation of the definition
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    y, _ = ops.matmul_forward(a, b)
    assert np.array_equal(y, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_zero_annihilates():
    rng = np.random.default_rng(0)
    a = rand64(rng, 3, 4)
    y, _ = ops.matmul_forward(a, np.zeros((4, 2)))
    assert np.array_equal(y, np.zeros((3, 2)))


def test_matmul_backward_formulas():
    rng = np.random.default_rng(1)
    a, b, dc = rand64(rng, 3, 4), rand64(rng, 4, 2), rand64(rng, 3, 2)
    _, cache = ops.matmul_forward(a, b)
    da, db = ops.matmul_backward(dc, cache)
    assert np.allclose(da, dc @ b.T)
    assert np.allclose(db, a.T @ dc)


def test_matmul_shape_mismatch():
    with pytest.raises(ops.DimensionError):
        ops.matmul_forward(np.zeros((2, 3)), np.zeros((4, 2)))


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def conv2d_naive(x, w, stride, pad):
    """Nested-loop convolution oracle, independent of the im2col path."""
    b, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    y = np.zeros((b, f, ho, wo))
    for bi in range(b):
        for fi in range(f):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    y[bi, fi, i, j] = (patch * w[fi]).sum()
    return y


def test_conv2d_tiny_hand_case():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    w = np.ones((1, 1, 2, 2))
    y, _ = ops.conv2d_forward(x, w)
    assert y.shape == (1, 1, 1, 1)
    assert y[0, 0, 0, 0] == 10.0
    assert np.allclose(y, conv2d_naive(x, w, 1, 0))


def test_conv2d_zero_kernel():
    rng = np.random.default_rng(2)
    x = rand64(rng, 2, 3, 5, 5)
    y, _ = ops.conv2d_forward(x, np.zeros((4, 3, 3, 3)), stride=1, pad=1)
    assert np.array_equal(y, np.zeros_like(y))


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(3)
    x = rand64(rng, 2, 3, 5, 5)
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    y, _ = ops.conv2d_forward(x, w)
    assert np.allclose(y, x)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv2d_matches_naive(stride, pad):
    rng = np.random.default_rng(4)
    x = rand64(rng, 2, 2, 6, 6)
    w = rand64(rng, 3, 2, 3, 3)
    y, _ = ops.conv2d_forward(x, w, stride=stride, pad=pad)
    assert np.allclose(y, conv2d_naive(x, w, stride, pad), atol=1e-12)


def test_conv2d_channel_mismatch():
    with pytest.raises(ops.DimensionError):
        ops.conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------

def bn_state(c):
    return np.ones(c), np.zeros(c), np.zeros(c), np.ones(c)


def test_batchnorm_constant_input_zeroed():
    gamma, beta, rm, rv = bn_state(2)
    x = np.full((3, 2, 4, 4), 7.0)
    y, _ = ops.batchnorm2d_forward(x, gamma, beta, rm, rv, train=True)
    assert np.allclose(y, 0.0)


def test_batchnorm_two_value_batch():
    # hand evaluation: mean 2, biased var 1 -> +-1/sqrt(1+eps)
    gamma, beta, rm, rv = bn_state(1)
    x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
    y, _ = ops.batchnorm2d_forward(x, gamma, beta, rm, rv, train=True)
    expected = 1.0 / np.sqrt(1.0 + 1e-5)
    assert np.allclose(y.ravel(), [-expected, expected])
    assert abs(expected - 0.999995) < 1e-6


def test_batchnorm_infer_uses_running_stats():
    gamma, beta, rm, rv = bn_state(2)
    rng = np.random.default_rng(5)
    x = rand64(rng, 2, 2, 3, 3)
    y, _ = ops.batchnorm2d_forward(x, gamma, beta, rm, rv, train=False)
    assert np.allclose(y, x, atol=1e-5)


def test_batchnorm_running_stats_ema():
    gamma, beta, rm, rv = bn_state(1)
    x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
    ops.batchnorm2d_forward(x, gamma, beta, rm, rv, train=True)
    assert np.allclose(rm, 0.9 * 0.0 + 0.1 * 2.0)
    assert np.allclose(rv, 0.9 * 1.0 + 0.1 * 1.0)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def test_activation_point_values():
    y, _ = ops.activation_forward(np.array([0.0]), "sigmoid")
    assert y[0] == 0.5
    y, _ = ops.activation_forward(np.array([0.0]), "tanh")
    assert y[0] == 0.0
    y, _ = ops.activation_forward(np.array([-1.0]), "relu")
    assert y[0] == 0.0


def test_relu_backward_gating():
    x = np.array([2.0, -3.0])
    _, cache = ops.activation_forward(x, "relu")
    dx = ops.activation_backward(np.array([5.0, 5.0]), cache)
    assert np.array_equal(dx, [5.0, 0.0])


def test_sigmoid_derivative_matches_central_difference():
    h = 1e-6
    x = np.array([0.0])
    _, cache = ops.activation_forward(x, "sigmoid")
    analytic = ops.activation_backward(np.array([1.0]), cache)[0]
    numeric = (ops.sigmoid(x + h) - ops.sigmoid(x - h))[0] / (2 * h)
    assert abs(analytic - 0.25) < 1e-12
    assert abs(analytic - numeric) < 1e-6


def test_sigmoid_stable_in_tails():
    y = ops.sigmoid(np.array([-1000.0, 1000.0]))
    assert np.all(np.isfinite(y))
    assert y[0] == 0.0 and y[1] == 1.0


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------

def test_maxpool_value_and_routing():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    y, cache = ops.maxpool2d_forward(x, k=2, stride=2)
    assert y[0, 0, 0, 0] == 4.0
    dx = ops.maxpool2d_backward(np.ones((1, 1, 1, 1)), cache)
    assert np.array_equal(dx[0, 0], [[0.0, 0.0], [0.0, 1.0]])


def test_maxpool_tie_breaks_row_major():
    x = np.array([[5.0, 5.0], [1.0, 2.0]]).reshape(1, 1, 2, 2)
    y, cache = ops.maxpool2d_forward(x, k=2, stride=2)
    assert y[0, 0, 0, 0] == 5.0
    dx = ops.maxpool2d_backward(np.ones((1, 1, 1, 1)), cache)
    assert np.array_equal(dx[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_maxpool_padded_stride():
    rng = np.random.default_rng(6)
    x = rand64(rng, 1, 1, 5, 5)
    y, _ = ops.maxpool2d_forward(x, k=3, stride=2, pad=1)
    assert y.shape == (1, 1, 3, 3)
    # corner window only covers the in-bounds quadrant
    assert y[0, 0, 0, 0] == x[0, 0, :2, :2].max()


# ---------------------------------------------------------------------------
# GAP
# ---------------------------------------------------------------------------

def test_gap_mean_and_shape():
    x = np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 1, 2, 2)
    y, _ = ops.gap_forward(x)
    assert y[0, 0] == 4.0
    rng = np.random.default_rng(7)
    x = rand64(rng, 3, 5, 4, 6)
    y, _ = ops.gap_forward(x)
    assert y.shape == (3, 5)


def test_gap_backward_uniform():
    x = np.zeros((1, 1, 2, 2))
    _, cache = ops.gap_forward(x)
    dx = ops.gap_backward(np.ones((1, 1)), cache)
    assert np.allclose(dx, 0.25)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_gap_spatial_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4, 4))
    perm = rng.permutation(16)
    xp = x.reshape(2, 3, 16)[:, :, perm].reshape(2, 3, 4, 4)
    assert np.allclose(ops.gap_forward(x)[0], ops.gap_forward(xp)[0])


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------

def test_linear_identity():
    rng = np.random.default_rng(8)
    x = rand64(rng, 4, 3)
    y, _ = ops.linear_forward(x, np.eye(3), np.zeros(3))
    assert np.allclose(y, x)


def test_linear_hand_value():
    x = np.array([[1.0, 2.0]])
    w = np.array([[1.0, 1.0], [1.0, -1.0]])
    b = np.array([0.0, 1.0])
    y, _ = ops.linear_forward(x, w, b)
    assert np.array_equal(y[0], [3.0, 0.0])


def test_linear_zero_input_gives_bias():
    b = np.array([1.5, -2.5])
    y, _ = ops.linear_forward(np.zeros((3, 4)), np.ones((2, 4)), b)
    assert np.allclose(y, np.broadcast_to(b, (3, 2)))


# ---------------------------------------------------------------------------
# softmax cross-entropy
# ---------------------------------------------------------------------------

def test_ce_uniform_logits():
    loss, _ = ops.softmax_cross_entropy(np.zeros((1, 2)), np.array([0]))
    assert abs(loss - np.log(2)) < 1e-12


def test_ce_extreme_logits_no_overflow():
    loss, grad = ops.softmax_cross_entropy(np.array([[1000.0, 0.0]]), np.array([0]))
    assert np.isfinite(loss) and loss < 1e-10
    assert np.all(np.isfinite(grad))


def test_ce_gradient_value():
    _, grad = ops.softmax_cross_entropy(np.zeros((1, 2)), np.array([0]))
    assert np.allclose(grad[0], [-0.5, 0.5])


def test_ce_label_out_of_range():
    with pytest.raises(ValueError):
        ops.softmax_cross_entropy(np.zeros((1, 2)), np.array([2]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(2, 5), st.integers(1, 6))
def test_ce_gradient_rows_sum_to_zero(seed, k, b):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((b, k))
    labels = rng.integers(0, k, size=b)
    _, grad = ops.softmax_cross_entropy(logits, labels)
    assert np.allclose(grad.sum(axis=1), 0.0, atol=1e-12)


# ---------------------------------------------------------------------------
# backward linearity (64-bit, exact)
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("op", ["conv", "pool", "gap", "linear", "bn", "relu"])
def test_backward_linear_in_upstream(op):
    rng = np.random.default_rng(9)
    if op == "conv":
        x, w = rand64(rng, 2, 2, 5, 5), rand64(rng, 3, 2, 3, 3)
        _, cache = ops.conv2d_forward(x, w, 1, 1)
        dy = rand64(rng, 2, 3, 5, 5)
        one = ops.conv2d_backward(dy, cache, w)
        two = ops.conv2d_backward(2 * dy, cache, w)
        pairs = zip(one, two)
    elif op == "pool":
        x = rand64(rng, 1, 2, 4, 4)
        _, cache = ops.maxpool2d_forward(x, 2, 2)
        dy = rand64(rng, 1, 2, 2, 2)
        pairs = [(ops.maxpool2d_backward(dy, cache), ops.maxpool2d_backward(2 * dy, cache))]
    elif op == "gap":
        x = rand64(rng, 2, 3, 4, 4)
        _, cache = ops.gap_forward(x)
        dy = rand64(rng, 2, 3)
        pairs = [(ops.gap_backward(dy, cache), ops.gap_backward(2 * dy, cache))]
    elif op == "linear":
        x, w, b = rand64(rng, 3, 4), rand64(rng, 2, 4), rand64(rng, 2)
        _, cache = ops.linear_forward(x, w, b)
        dy = rand64(rng, 3, 2)
        pairs = zip(ops.linear_backward(dy, cache), ops.linear_backward(2 * dy, cache))
    elif op == "bn":
        gamma, beta, rm, rv = bn_state(3)
        x = rand64(rng, 2, 3, 4, 4)
        _, cache = ops.batchnorm2d_forward(x, gamma, beta, rm, rv, train=True)
        dy = rand64(rng, 2, 3, 4, 4)
        pairs = zip(ops.batchnorm2d_backward(dy, cache), ops.batchnorm2d_backward(2 * dy, cache))
    else:
        x = rand64(rng, 10)
        _, cache = ops.activation_forward(x, "relu")
        dy = rand64(rng, 10)
        pairs = [(ops.activation_backward(dy, cache), ops.activation_backward(2 * dy, cache))]
    for g1, g2 in pairs:
        assert np.array_equal(2 * np.asarray(g1), np.asarray(g2))


# ---------------------------------------------------------------------------
# grad_check harness
# ---------------------------------------------------------------------------

def test_grad_check_linear_ce_composite():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((2, 4))
    b = rng.standard_normal(2)
    labels = np.array([0, 1, 0])

    def f():
        logits, cache = ops.linear_forward(x, w, b)
        loss, dlogits = ops.softmax_cross_entropy(logits, labels)
        dx, dw, db = ops.linear_backward(dlogits, cache)
        return loss, [dw, db, dx]

    err = ops.grad_check(f, [w, b, x], h=1e-5)
    assert err < 1e-6


def test_grad_check_detects_doubled_gradient():
    x = np.array([3.0])

    def f():
        return float(0.5 * x[0] ** 2), [2.0 * x]  # analytic gradient doubled

    assert abs(ops.grad_check(f, [x]) - 0.5) < 1e-6


def test_grad_check_constant_function():
    x = np.array([1.0, 2.0])

    def f():
        return 1.0, [np.zeros(2)]

    assert ops.grad_check(f, [x]) == 0.0


def test_grad_check_rejects_float32():
    x = np.zeros(2, dtype=np.float32)
    with pytest.raises(ValueError):
        ops.grad_check(lambda: (0.0, [x]), [x])


# ---------------------------------------------------------------------------
# Parameter
# ---------------------------------------------------------------------------

def test_parameter_state_shapes():
    p = ops.Parameter(np.zeros((2, 3), dtype=np.float32))
    assert p.grad.shape == p.adam_m.shape == p.adam_v.shape == (2, 3)
    assert not p.frozen
