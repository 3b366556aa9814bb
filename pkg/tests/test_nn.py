"""Layer forward values and finite-difference gradient checks."""

import numpy as np
import pytest

from drgrade import nn
from drgrade.errors import ShapeError
from oracles import finite_difference, rel_error

GRAD_TOL = 1e-4


def randn(rng, *shape):
    return rng.standard_normal(shape)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def test_conv2d_identity_kernel():
    x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
    w = np.ones((1, 1, 1, 1))
    b = np.zeros(1)
    out, _ = nn.conv2d(x, w, b)
    np.testing.assert_array_equal(out, x)


def test_conv2d_1x1_matches_matmul_oracle():
    rng = np.random.default_rng(0)
    x = randn(rng, 1, 2, 4, 4)
    w = randn(rng, 3, 2, 1, 1)
    b = randn(rng, 3)
    out, _ = nn.conv2d(x, w, b)
    # oracle: per-pixel matrix product of the channel vector with the 2->3 map
    wmat = w[:, :, 0, 0]
    expect = np.empty((1, 3, 4, 4))
    for i in range(4):
        for j in range(4):
            expect[0, :, i, j] = wmat @ x[0, :, i, j] + b
    assert rel_error(out, expect) < 1e-12


def test_conv2d_output_size_stride_padding():
    rng = np.random.default_rng(1)
    x = randn(rng, 2, 3, 7, 9)
    w = randn(rng, 4, 3, 3, 3)
    b = randn(rng, 4)
    out, _ = nn.conv2d(x, w, b, stride=2, padding=1)
    assert out.shape == (2, 4, (7 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)


def test_conv2d_channel_mismatch_names_dimension():
    x = np.zeros((1, 2, 4, 4))
    w = np.zeros((1, 3, 3, 3))
    with pytest.raises(ShapeError, match="C=2"):
        nn.conv2d(x, w, np.zeros(1))


@pytest.mark.parametrize("seed", range(10))
def test_conv2d_gradients(seed):
    rng = np.random.default_rng(seed)
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    k = int(rng.integers(1, 4))
    x = randn(rng, 2, 2, 5, 5)
    w = randn(rng, 3, 2, k, k)
    b = randn(rng, 3)
    r = randn(rng, *nn.conv2d(x, w, b, stride, padding)[0].shape)

    def loss():
        out, _ = nn.conv2d(x, w, b, stride, padding)
        return float((out * r).sum())

    out, ctx = nn.conv2d(x, w, b, stride, padding)
    d_x, d_w, d_b = nn.conv2d_backward(ctx, r)
    assert rel_error(d_x, finite_difference(loss, x)) < GRAD_TOL
    assert rel_error(d_w, finite_difference(loss, w)) < GRAD_TOL
    assert rel_error(d_b, finite_difference(loss, b)) < GRAD_TOL


# ---------------------------------------------------------------------------
# batchnorm2d
# ---------------------------------------------------------------------------

def test_batchnorm_constant_channel_maps_to_zero():
    x = np.full((2, 3, 4, 4), 7.0)
    state = nn.BatchNormState.initial(3, dtype=np.float64)
    out, _ = nn.batchnorm2d(x, np.ones(3), np.zeros(3), state, training=True)
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_batchnorm_beta_shifts_mean():
    rng = np.random.default_rng(2)
    x = randn(rng, 4, 3, 5, 5)
    state = nn.BatchNormState.initial(3, dtype=np.float64)
    out, _ = nn.batchnorm2d(x, np.ones(3), np.full(3, 5.0), state, training=True)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 5.0, atol=1e-6)


def test_batchnorm_single_value_rejected_in_train_mode():
    state = nn.BatchNormState.initial(2, dtype=np.float64)
    with pytest.raises(ShapeError):
        nn.batchnorm2d(np.ones((1, 2, 1, 1)), np.ones(2), np.zeros(2), state, training=True)


def test_batchnorm_running_stats_ema():
    rng = np.random.default_rng(3)
    x = randn(rng, 8, 2, 4, 4)
    state = nn.BatchNormState.initial(2, dtype=np.float64)
    nn.batchnorm2d(x, np.ones(2), np.zeros(2), state, training=True)
    mean = x.mean(axis=(0, 2, 3))
    count = 8 * 4 * 4
    var = x.var(axis=(0, 2, 3)) * count / (count - 1)
    np.testing.assert_allclose(state.running_mean, 0.1 * mean, atol=1e-12)
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * var, atol=1e-12)


def test_batchnorm_eval_uses_running_stats():
    rng = np.random.default_rng(4)
    x = randn(rng, 2, 2, 3, 3)
    state = nn.BatchNormState(np.array([1.0, -1.0]), np.array([4.0, 9.0]))
    out, _ = nn.batchnorm2d(x, np.ones(2), np.zeros(2), state, training=False)
    expect = (x - np.array([1.0, -1.0])[None, :, None, None]) / np.sqrt(
        np.array([4.0, 9.0])[None, :, None, None] + nn.BN_EPS)
    np.testing.assert_allclose(out, expect, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_batchnorm_gradients(seed):
    rng = np.random.default_rng(100 + seed)
    x = randn(rng, 3, 2, 4, 4)
    gamma = randn(rng, 2)
    beta = randn(rng, 2)
    r = randn(rng, 3, 2, 4, 4)

    def loss():
        state = nn.BatchNormState.initial(2, dtype=np.float64)
        out, _ = nn.batchnorm2d(x, gamma, beta, state, training=True)
        return float((out * r).sum())

    state = nn.BatchNormState.initial(2, dtype=np.float64)
    out, ctx = nn.batchnorm2d(x, gamma, beta, state, training=True)
    d_x, d_gamma, d_beta = nn.batchnorm2d_backward(ctx, r)
    assert rel_error(d_x, finite_difference(loss, x)) < GRAD_TOL
    assert rel_error(d_gamma, finite_difference(loss, gamma)) < GRAD_TOL
    assert rel_error(d_beta, finite_difference(loss, beta)) < GRAD_TOL


# ---------------------------------------------------------------------------
# pointwise ops and pooling
# ---------------------------------------------------------------------------

def test_sigmoid_at_zero():
    out, _ = nn.sigmoid(np.zeros(3))
    np.testing.assert_array_equal(out, 0.5)


def test_sigmoid_range_open_interval():
    out, _ = nn.sigmoid(np.array([-40.0, 0.0, 40.0]))
    assert (out > 0).all() and (out < 1).all()


def test_adaptive_avg_pool_mean():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)
    out, _ = nn.adaptive_avg_pool_1x1(x)
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 2.5


def test_global_avg_pool_shape():
    rng = np.random.default_rng(5)
    x = randn(rng, 2, 3, 4, 5)
    out, _ = nn.global_avg_pool(x)
    assert out.shape == (2, 3)
    np.testing.assert_allclose(out, x.mean(axis=(2, 3)))


def test_mul_broadcast_incompatible_rejected():
    with pytest.raises(ShapeError):
        nn.mul_broadcast(np.ones((1, 2, 3, 3)), np.ones((1, 3, 1, 1)))


@pytest.mark.parametrize("seed", range(10))
def test_mul_broadcast_gradients(seed):
    rng = np.random.default_rng(200 + seed)
    a = randn(rng, 2, 3, 4, 4)
    b = randn(rng, 2, 3, 1, 1) if seed % 2 == 0 else randn(rng, 2, 1, 4, 4)
    r = randn(rng, 2, 3, 4, 4)

    def loss():
        out, _ = nn.mul_broadcast(a, b)
        return float((out * r).sum())

    _, ctx = nn.mul_broadcast(a, b)
    d_a, d_b = nn.mul_broadcast_backward(ctx, r)
    assert rel_error(d_a, finite_difference(loss, a)) < GRAD_TOL
    assert rel_error(d_b, finite_difference(loss, b)) < GRAD_TOL


@pytest.mark.parametrize("seed", range(5))
def test_pointwise_and_pool_gradients(seed):
    rng = np.random.default_rng(300 + seed)
    x = randn(rng, 2, 3, 4, 4)
    r4 = randn(rng, 2, 3, 4, 4)
    r_pool = randn(rng, 2, 3, 1, 1)
    r_gap = randn(rng, 2, 3)

    def relu_loss():
        out, _ = nn.relu(x)
        return float((out * r4).sum())

    _, ctx = nn.relu(x)
    assert rel_error(nn.relu_backward(ctx, r4), finite_difference(relu_loss, x)) < GRAD_TOL

    def sig_loss():
        out, _ = nn.sigmoid(x)
        return float((out * r4).sum())

    _, ctx = nn.sigmoid(x)
    assert rel_error(nn.sigmoid_backward(ctx, r4), finite_difference(sig_loss, x)) < GRAD_TOL

    def pool_loss():
        out, _ = nn.adaptive_avg_pool_1x1(x)
        return float((out * r_pool).sum())

    _, ctx = nn.adaptive_avg_pool_1x1(x)
    assert rel_error(nn.adaptive_avg_pool_1x1_backward(ctx, r_pool),
                     finite_difference(pool_loss, x)) < GRAD_TOL

    def gap_loss():
        out, _ = nn.global_avg_pool(x)
        return float((out * r_gap).sum())

    _, ctx = nn.global_avg_pool(x)
    assert rel_error(nn.global_avg_pool_backward(ctx, r_gap),
                     finite_difference(gap_loss, x)) < GRAD_TOL


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------

def test_linear_identity():
    rng = np.random.default_rng(6)
    x = randn(rng, 3, 4)
    out, _ = nn.linear(x, np.eye(4), np.zeros(4))
    np.testing.assert_array_equal(out, x)


def test_linear_hand_arithmetic():
    out, _ = nn.linear(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]), np.array([5.0]))
    assert out.shape == (1, 1)
    assert out[0, 0] == 16.0


def test_linear_dimension_mismatch():
    with pytest.raises(ShapeError, match="weight"):
        nn.linear(np.ones((2, 3)), np.ones((4, 2)), np.ones(2))


@pytest.mark.parametrize("seed", range(10))
def test_linear_gradients(seed):
    rng = np.random.default_rng(400 + seed)
    x = randn(rng, 3, 4)
    w = randn(rng, 4, 2)
    b = randn(rng, 2)
    r = randn(rng, 3, 2)

    def loss():
        out, _ = nn.linear(x, w, b)
        return float((out * r).sum())

    _, ctx = nn.linear(x, w, b)
    d_x, d_w, d_b = nn.linear_backward(ctx, r)
    assert rel_error(d_x, finite_difference(loss, x)) < GRAD_TOL
    assert rel_error(d_w, finite_difference(loss, w)) < GRAD_TOL
    assert rel_error(d_b, finite_difference(loss, b)) < GRAD_TOL


# ---------------------------------------------------------------------------
# module-wide properties
# ---------------------------------------------------------------------------

def test_forward_ops_deterministic_and_finite():
    rng = np.random.default_rng(7)
    for _ in range(20):
        x = randn(rng, 2, 4, 5, 5).astype(np.float32)
        w = randn(rng, 3, 4, 3, 3).astype(np.float32)
        b = randn(rng, 3).astype(np.float32)
        a, _ = nn.conv2d(x, w, b, padding=1)
        b2, _ = nn.conv2d(x, w, b, padding=1)
        assert a.tobytes() == b2.tobytes()
        assert np.isfinite(a).all()
        s, _ = nn.sigmoid(a)
        assert np.isfinite(s).all()
