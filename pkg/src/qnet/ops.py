"""Dense layer primitives with hand-derived backward passes.

Arrays are plain numpy ndarrays, row-major, batch outermost (B x C x H x W
for feature maps). There is no autodiff graph: every op is a pair of
functions, ``*_forward`` returning ``(y, cache)`` and ``*_backward`` taking
the upstream gradient plus the cache. Ops compute in the dtype of their
inputs, so the same code runs the float32 training path and the float64
path used by ``grad_check``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Parameter:
    """A trainable array with its gradient and Adam state.

    All four arrays share one shape. ``frozen`` parameters are skipped by
    the optimizer and must stay bit-identical across steps.
    """

    value: np.ndarray
    grad: np.ndarray = field(default=None)
    adam_m: np.ndarray = field(default=None)
    adam_v: np.ndarray = field(default=None)
    frozen: bool = False

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.value)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul_forward(a: np.ndarray, b: np.ndarray):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    return a @ b, (a, b)


def matmul_backward(dc: np.ndarray, cache):
    a, b = cache
    return dc @ b.T, a.T @ dc


# ---------------------------------------------------------------------------
# conv2d (im2col + GEMM)
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Return patches as (B, C*kh*kw, Ho*Wo) plus output spatial dims."""
    b, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} (pad={pad})")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(b, c * kh * kw, ho * wo), ho, wo


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0):
    """2-D cross-correlation, no bias. x: (B,C,H,W), w: (F,C,kh,kw)."""
    b, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {cw}")
    colmat, ho, wo = _im2col(x, kh, kw, stride, pad)
    y = np.matmul(w.reshape(f, -1), colmat)               # (B, F, Ho*Wo)
    cache = (colmat, x.shape, w.shape, stride, pad, ho, wo)
    return y.reshape(b, f, ho, wo), cache


def conv2d_backward(dy: np.ndarray, cache, w: np.ndarray):
    colmat, xshape, wshape, stride, pad, ho, wo = cache
    b, c, h, wd = xshape
    f, _, kh, kw = wshape
    dymat = dy.reshape(b, f, ho * wo)
    dw = np.matmul(dymat, colmat.transpose(0, 2, 1)).sum(axis=0).reshape(wshape)
    dcols = np.matmul(w.reshape(f, -1).T, dymat).reshape(b, c, kh, kw, ho, wo)
    # col2im: scatter-add each kernel offset back into the padded input
    dxp = np.zeros((b, c, h + 2 * pad, wd + 2 * pad), dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    return dx, dw


# ---------------------------------------------------------------------------
# batch normalization (2d, per channel)
# ---------------------------------------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm2d_forward(x, gamma, beta, running_mean, running_var, train,
                        momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel normalization over (B,H,W).

    Train mode normalizes with batch statistics (biased variance) and
    updates the running stats in place via EMA; infer mode uses the
    running stats and leaves them untouched.
    """
    g = gamma.reshape(1, -1, 1, 1)
    bta = beta.reshape(1, -1, 1, 1)
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    y = g * xhat + bta
    cache = (xhat, inv_std, gamma, train)
    return y.astype(x.dtype, copy=False), cache


def batchnorm2d_backward(dy, cache):
    xhat, inv_std, gamma, train = cache
    n = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma.reshape(1, -1, 1, 1)
    if train:
        # standard batch-norm gradient through the batch statistics
        dx = (inv_std.reshape(1, -1, 1, 1) / n) * (
            n * dxhat
            - dxhat.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
        )
    else:
        dx = dxhat * inv_std.reshape(1, -1, 1, 1)
    return dx.astype(dy.dtype, copy=False), dgamma, dbeta


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def sigmoid(x: np.ndarray) -> np.ndarray:
    # split form avoids exp overflow in either tail
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation_forward(x: np.ndarray, kind: str):
    if kind == "relu":
        y = np.maximum(x, 0)
        cache = (kind, x > 0)
    elif kind == "sigmoid":
        y = sigmoid(x)
        cache = (kind, y)
    elif kind == "tanh":
        y = np.tanh(x)
        cache = (kind, y)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return y, cache


def activation_backward(dy: np.ndarray, cache):
    kind, saved = cache
    if kind == "relu":
        return dy * saved
    if kind == "sigmoid":
        return dy * saved * (1 - saved)
    return dy * (1 - saved * saved)


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------

def maxpool2d_forward(x: np.ndarray, k: int, stride: int, pad: int = 0):
    """Per-window max. Gradient routes to the first (row-major) maximum."""
    b, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"maxpool2d: window {k} does not fit input {h}x{w}")
    if pad:
        xp = np.full((b, c, h + 2 * pad, w + 2 * pad), -np.inf, dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    windows = np.stack([
        xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
        for i in range(k) for j in range(k)
    ])                                                    # (k*k, B, C, Ho, Wo)
    # argmax over axis 0 returns the first maximum, i.e. row-major tie-break
    arg = windows.argmax(axis=0)
    y = np.take_along_axis(windows, arg[None], axis=0)[0]
    cache = (arg, x.shape, k, stride, pad, ho, wo)
    return y, cache


def maxpool2d_backward(dy: np.ndarray, cache):
    arg, xshape, k, stride, pad, ho, wo = cache
    b, c, h, w = xshape
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=dy.dtype)
    for idx in range(k * k):
        mask = arg == idx
        if not mask.any():
            continue
        i, j = divmod(idx, k)
        dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dy * mask
    return dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp


# ---------------------------------------------------------------------------
# global average pooling
# ---------------------------------------------------------------------------

def gap_forward(x: np.ndarray):
    """(B,C,H,W) -> (B,C): spatial mean per feature map."""
    return x.mean(axis=(2, 3)), x.shape


def gap_backward(dy: np.ndarray, cache):
    b, c, h, w = cache
    return np.broadcast_to(dy[:, :, None, None] / (h * w), (b, c, h, w)).astype(dy.dtype, copy=False)


# ---------------------------------------------------------------------------
# affine layer
# ---------------------------------------------------------------------------

def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """y = x @ w.T + b. x: (B,n), w: (m,n), b: (m,)."""
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: input dim {x.shape[1]} != weight dim {w.shape[1]}")
    return x @ w.T + b, (x, w)


def linear_backward(dy: np.ndarray, cache):
    x, w = cache
    return dy @ w, dy.T @ x, dy.sum(axis=0)


# ---------------------------------------------------------------------------
# softmax cross-entropy
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean NLL over the batch, max-shift stabilized.

    Returns (loss, dlogits) with dlogits = (softmax - onehot) / B.
    """
    labels = np.asarray(labels)
    k = logits.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0,{k})")
    b = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsumexp - z[np.arange(b), labels]))
    d = softmax(logits)
    d[np.arange(b), labels] -= 1.0
    return loss, (d / b).astype(logits.dtype, copy=False)


# ---------------------------------------------------------------------------
# finite-difference gradient checker
# ---------------------------------------------------------------------------

def grad_check(f, params, h: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar map against central differences.

    ``f()`` evaluates the map at the current parameter values and returns
    ``(loss, grads)`` with one gradient array per entry of ``params``; the
    arrays in ``params`` are perturbed in place. Everything must be float64.
    Returns max over elements of |a - n| / max(|a|, |n|, 1e-12).
    """
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("grad_check requires float64 parameters")
    _, grads = f()
    max_err = 0.0
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        gflat = np.asarray(g, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = f()
            flat[i] = orig - h
            lm, _ = f()
            flat[i] = orig
            num = (lp - lm) / (2 * h)
            ana = gflat[i]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-12)
            if err > max_err:
                max_err = err
    return max_err
