"""Dense-tensor layer numerics with paired forward/backward passes.

Arrays are numpy ndarrays in NCHW layout (row-major). Single precision is the
training default; pass float64 inputs to run a layer in double precision, which
is what the finite-difference gradient checks use. There is no autodiff graph:
every layer exposes an explicit forward returning (output, ctx) and a matching
backward consuming that ctx.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class LayerGrads:
    """Gradients of a composite block: input gradient plus named parameter gradients."""

    d_input: np.ndarray
    d_params: dict[str, np.ndarray] = field(default_factory=dict)


def _require(cond, msg):
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _im2col(xp, kh, kw, stride, out_h, out_w):
    n, c, _, _ = xp.shape
    cols = np.empty((n, c, kh, kw, out_h, out_w), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride]
    return cols.reshape(n, c * kh * kw, out_h * out_w)


def _col2im(cols, x_shape, kh, kw, stride, out_h, out_w):
    n, c, hp, wp = x_shape
    xp = np.zeros(x_shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, out_h, out_w)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += cols[:, :, i, j]
    return xp


def conv2d(x, weight, bias, stride=1, padding=0):
    """2D convolution: x (N,C,H,W) * weight (O,I,kh,kw) + bias (O) -> (N,O,H',W').

    H' = floor((H + 2*padding - kh)/stride) + 1, likewise for W'.
    """
    _require(x.ndim == 4, f"conv2d input must be 4-d NCHW, got {x.ndim}-d")
    _require(weight.ndim == 4, f"conv2d weight must be 4-d OIKK, got {weight.ndim}-d")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    _require(c == i, f"conv2d channel mismatch: input has C={c}, weight expects I={i}")
    _require(bias.shape == (o,), f"conv2d bias must have shape ({o},), got {bias.shape}")
    _require(kh <= h + 2 * padding, f"conv2d kernel height {kh} exceeds padded input height {h + 2 * padding}")
    _require(kw <= w + 2 * padding, f"conv2d kernel width {kw} exceeds padded input width {w + 2 * padding}")
    _require(stride >= 1, f"conv2d stride must be >= 1, got {stride}")

    if padding > 0:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x
    else:
        xp = x
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1

    cols = _im2col(xp, kh, kw, stride, out_h, out_w)
    wmat = weight.reshape(o, -1)
    out = np.matmul(wmat, cols).reshape(n, o, out_h, out_w)
    out += bias[None, :, None, None]
    ctx = (cols, weight, xp.shape, (n, c, h, w), stride, padding, out_h, out_w)
    return out, ctx


def conv2d_backward(ctx, d_out):
    """Gradients of conv2d w.r.t. input, weight and bias."""
    cols, weight, xp_shape, x_shape, stride, padding, out_h, out_w = ctx
    n, c, h, w = x_shape
    o, _, kh, kw = weight.shape
    go = d_out.reshape(n, o, out_h * out_w)

    d_bias = d_out.sum(axis=(0, 2, 3))
    d_wmat = np.einsum("nol,nkl->ok", go, cols)
    d_weight = d_wmat.reshape(weight.shape)
    d_cols = np.einsum("ok,nol->nkl", weight.reshape(o, -1), go)
    d_xp = _col2im(d_cols, xp_shape, kh, kw, stride, out_h, out_w)
    if padding > 0:
        d_x = d_xp[:, :, padding:padding + h, padding:padding + w]
    else:
        d_x = d_xp
    return d_x, d_weight, d_bias


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Caller-owned running statistics; must not be shared across concurrent train steps."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def initial(cls, channels, dtype=np.float32):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def copy(self):
        return BatchNormState(self.running_mean.copy(), self.running_var.copy())


def batchnorm2d(x, gamma, beta, state, training, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalization over (N,H,W).

    Train mode normalizes with batch statistics (biased variance) and updates
    `state` in place by exponential moving average; eval mode uses the running
    statistics unchanged.
    """
    _require(x.ndim == 4, f"batchnorm2d input must be 4-d NCHW, got {x.ndim}-d")
    n, c, h, w = x.shape
    _require(gamma.shape == (c,), f"batchnorm2d gamma must have shape ({c},), got {gamma.shape}")
    _require(beta.shape == (c,), f"batchnorm2d beta must have shape ({c},), got {beta.shape}")
    if eps <= 0:
        raise ValueError(f"batchnorm2d eps must be > 0, got {eps}")
    count = n * h * w
    if training and count < 2:
        raise ShapeError("batchnorm2d train mode needs more than one value per channel (zero batch variance)")

    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))  # biased
        unbiased = var * count / (count - 1)
        state.running_mean[:] = (1.0 - momentum) * state.running_mean + momentum * mean
        state.running_var[:] = (1.0 - momentum) * state.running_var + momentum * unbiased
    else:
        mean = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    ctx = (xhat, gamma, inv_std, training, count)
    return out, ctx


def batchnorm2d_backward(ctx, d_out):
    """Gradients of batchnorm2d w.r.t. input, gamma and beta."""
    xhat, gamma, inv_std, training, count = ctx
    d_beta = d_out.sum(axis=(0, 2, 3))
    d_gamma = (d_out * xhat).sum(axis=(0, 2, 3))
    d_xhat = d_out * gamma[None, :, None, None]
    if training:
        mean_dxhat = d_xhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_dxhat_xhat = (d_xhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        d_x = inv_std[None, :, None, None] * (d_xhat - mean_dxhat - xhat * mean_dxhat_xhat)
    else:
        d_x = d_xhat * inv_std[None, :, None, None]
    return d_x, d_gamma, d_beta


# ---------------------------------------------------------------------------
# Pointwise ops and pooling
# ---------------------------------------------------------------------------

def relu(x):
    out = np.maximum(x, 0.0)
    return out, (x,)


def relu_backward(ctx, d_out):
    (x,) = ctx
    return d_out * (x > 0)


def sigmoid(x):
    # stable in both tails; clamped so saturation cannot round onto 0 or 1
    out = np.empty_like(x, dtype=x.dtype)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    info = np.finfo(out.dtype)
    np.clip(out, info.tiny, np.nextafter(out.dtype.type(1.0), out.dtype.type(0.0)), out=out)
    return out, (out,)


def sigmoid_backward(ctx, d_out):
    (out,) = ctx
    return d_out * out * (1.0 - out)


def _unbroadcast(grad, shape):
    """Sum-reduce a gradient back to a broadcast operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def mul_broadcast(a, b):
    """Elementwise product with numpy broadcasting (e.g. N,C,H,W gated by N,C,1,1)."""
    try:
        out = a * b
    except ValueError:
        raise ShapeError(f"mul_broadcast shapes {a.shape} and {b.shape} are not broadcast-compatible") from None
    return out, (a, b)


def mul_broadcast_backward(ctx, d_out):
    a, b = ctx
    d_a = _unbroadcast(d_out * b, a.shape)
    d_b = _unbroadcast(d_out * a, b.shape)
    return d_a, d_b


def adaptive_avg_pool_1x1(x):
    """Mean over spatial dims, keeping N,C,1,1."""
    _require(x.ndim == 4, f"adaptive_avg_pool_1x1 input must be 4-d NCHW, got {x.ndim}-d")
    out = x.mean(axis=(2, 3), keepdims=True)
    return out, (x.shape,)


def adaptive_avg_pool_1x1_backward(ctx, d_out):
    (x_shape,) = ctx
    _, _, h, w = x_shape
    return np.broadcast_to(d_out / (h * w), x_shape).copy()


def global_avg_pool(x):
    """Mean over spatial dims, flattened to (N, C)."""
    _require(x.ndim == 4, f"global_avg_pool input must be 4-d NCHW, got {x.ndim}-d")
    out = x.mean(axis=(2, 3))
    return out, (x.shape,)


def global_avg_pool_backward(ctx, d_out):
    (x_shape,) = ctx
    _, _, h, w = x_shape
    return np.broadcast_to(d_out[:, :, None, None] / (h * w), x_shape).copy()


# ---------------------------------------------------------------------------
# Linear
# ---------------------------------------------------------------------------

def linear(x, weight, bias):
    """Affine map: x (N,D) @ weight (D,M) + bias (M)."""
    _require(x.ndim == 2, f"linear input must be 2-d (N,D), got {x.ndim}-d")
    n, d = x.shape
    _require(weight.ndim == 2 and weight.shape[0] == d,
             f"linear weight must have shape ({d}, M), got {weight.shape}")
    m = weight.shape[1]
    _require(bias.shape == (m,), f"linear bias must have shape ({m},), got {bias.shape}")
    out = x @ weight + bias
    return out, (x, weight)


def linear_backward(ctx, d_out):
    x, weight = ctx
    d_x = d_out @ weight.T
    d_weight = x.T @ d_out
    d_bias = d_out.sum(axis=0)
    return d_x, d_weight, d_bias
