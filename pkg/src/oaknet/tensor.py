"""Dense array kernels with paired analytic backward passes.

Every kernel is a pure function: it takes numpy arrays, returns the result
plus an opaque cache, and has a matching ``*_backward`` that consumes the
cache and upstream gradients to produce exact analytic gradients.  Kernels
are dtype-polymorphic: float32 is the working precision, float64 is used by
the gradient-check suites.

Conventions
-----------
* Feature maps are NCHW (batch, channels, height, width).
* Convolution is cross-correlation (no kernel flip).
* "same" padding zero-fills with the extra pixel on the bottom/right and
  yields ceil(in / stride) output extents; "valid" yields
  floor((in - k) / stride) + 1.
* Pooling is always valid.
* Max-pool ties resolve to the first index in row-major window order, and
  the backward pass routes the full gradient there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when an operand dimension does not match the kernel contract."""

    def __init__(self, op, axis, expected, got):
        self.op = op
        self.axis = axis
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: axis {axis!r} expected {expected}, got {got}")


class DegenerateVarianceError(ValueError):
    """Raised when batch statistics cannot be estimated (fewer than 2 samples)."""


@dataclass(frozen=True)
class ConvParams:
    """Convolution hyper-parameters (kernel count, size, stride, padding)."""

    kernels: int
    kernel_size: tuple[int, int]
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        kh, kw = self.kernel_size
        if kh < 1 or kw < 1 or kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel size must be odd and >= 1, got {self.kernel_size}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.kernels < 1:
            raise ValueError(f"kernel count must be >= 1, got {self.kernels}")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")


def all_finite(x) -> bool:
    """True when *x* contains no NaN or Inf."""
    return bool(np.isfinite(x).all())


def conv_output_extent(size: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)  # ceil division
    return (size - k) // stride + 1


def _same_pad(size, k, stride):
    out = conv_output_extent(size, k, stride, "same")
    total = max((out - 1) * stride + k - size, 0)
    lo = total // 2
    return lo, total - lo  # extra pixel goes to the bottom/right


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def conv2d_forward(x, w, b, stride=1, padding="same"):
    """Cross-correlate ``x`` (N,C,H,W) with ``w`` (K,C,kh,kw), add bias.

    Returns ``(y, cache)`` where y is (N,K,H',W').
    """
    if x.ndim != 4:
        raise ShapeError("conv2d", "input", "4 dims (N,C,H,W)", x.ndim)
    if w.ndim != 4:
        raise ShapeError("conv2d", "weights", "4 dims (K,C,kh,kw)", w.ndim)
    n, c, h, wd = x.shape
    k, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError("conv2d", "channels", c, cw)
    if b.shape != (k,):
        raise ShapeError("conv2d", "bias", (k,), b.shape)
    if padding == "valid" and (h < kh or wd < kw):
        raise ShapeError("conv2d", "height/width", f">= {kh}x{kw}", f"{h}x{wd}")

    if padding == "same":
        pt, pb = _same_pad(h, kh, stride)
        pl, pr = _same_pad(wd, kw, stride)
        xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    else:
        pt = pl = 0
        xp = x
    oh = conv_output_extent(h, kh, stride, padding)
    ow = conv_output_extent(wd, kw, stride, padding)

    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)
    y = cols @ w.reshape(k, -1).T + b
    y = y.reshape(n, oh, ow, k).transpose(0, 3, 1, 2)
    cache = (cols, w, x.shape, xp.shape, (pt, pl), stride)
    return np.ascontiguousarray(y), cache


def conv2d_backward(dy, cache):
    """Gradients of conv2d w.r.t. input, weights and bias."""
    cols, w, x_shape, xp_shape, (pt, pl), stride = cache
    n, c, h, wd = x_shape
    k, _, kh, kw = w.shape
    _, _, oh, ow = dy.shape

    dy2 = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(n * oh * ow, k)
    dw = (dy2.T @ cols).reshape(k, c, kh, kw)
    db = dy2.sum(axis=0)

    # (C,kh,kw,N,oh,ow) layout keeps each kernel-tap slice contiguous for the
    # scatter below, which dominates the backward cost on large maps
    dcols = (w.reshape(k, -1).T @ dy2.T).reshape(c, kh, kw, n, oh, ow)
    dxp = np.zeros(xp_shape, dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            sub = dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            sub += dcols[:, i, j].transpose(1, 0, 2, 3)
    dx = dxp[:, :, pt:pt + h, pl:pl + wd]
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------------------
# Max pooling
# ---------------------------------------------------------------------------

def maxpool2d_forward(x, kernel_size, stride):
    """Valid max pooling.  Returns ``(y, cache)``; cache records argmax positions."""
    kh, kw = kernel_size
    if x.ndim != 4:
        raise ShapeError("maxpool2d", "input", "4 dims (N,C,H,W)", x.ndim)
    n, c, h, w = x.shape
    if h < kh or w < kw:
        raise ShapeError("maxpool2d", "height/width", f">= {kh}x{kw}", f"{h}x{w}")
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, oh, ow, kh * kw)
    arg = flat.argmax(axis=-1)  # first occurrence wins ties
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    cache = (arg, x.shape, kernel_size, stride)
    return np.ascontiguousarray(y), cache


def maxpool2d_backward(dy, cache):
    arg, x_shape, (kh, kw), stride = cache
    _, _, oh, ow = dy.shape
    dx = np.zeros(x_shape, dtype=dy.dtype)
    for idx in range(kh * kw):
        i, j = divmod(idx, kw)
        sub = dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
        sub += dy * (arg == idx)
    return dx


# ---------------------------------------------------------------------------
# Nearest-neighbour upsampling
# ---------------------------------------------------------------------------

def upsample_nearest_forward(x, factor):
    """Replicate each pixel into a factor x factor block."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if x.ndim != 4:
        raise ShapeError("upsample", "input", "4 dims (N,C,H,W)", x.ndim)
    if factor == 1:
        return x.copy(), (x.shape, factor)
    y = x.repeat(factor, axis=2).repeat(factor, axis=3)
    return y, (x.shape, factor)


def upsample_nearest_backward(dy, cache):
    (n, c, h, w), factor = cache
    if factor == 1:
        return dy.copy()
    return dy.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))


# ---------------------------------------------------------------------------
# Dense
# ---------------------------------------------------------------------------

def dense_forward(x, w, b):
    """Affine map for (N,D) inputs: y = x w + b."""
    if x.ndim != 2:
        raise ShapeError("dense", "input", "2 dims (N,D)", x.ndim)
    if x.shape[1] != w.shape[0]:
        raise ShapeError("dense", "features", w.shape[0], x.shape[1])
    if b.shape != (w.shape[1],):
        raise ShapeError("dense", "bias", (w.shape[1],), b.shape)
    return x @ w + b, (x, w)


def dense_backward(dy, cache):
    x, w = cache
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


# ---------------------------------------------------------------------------
# Batch normalisation (per channel, NCHW)
# ---------------------------------------------------------------------------

def batchnorm_forward(x, gamma, beta, running_mean, running_var,
                      momentum=0.9, eps=1e-5, training=True):
    """Channel-wise batch normalisation.

    In training mode normalises by batch statistics over (N,H,W) and updates
    the running estimates in place; in inference mode normalises by the
    running statistics.
    """
    if x.ndim != 4:
        raise ShapeError("batchnorm", "input", "4 dims (N,C,H,W)", x.ndim)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batchnorm", "channels", (c,), gamma.shape)
    g = gamma.reshape(1, c, 1, 1)

    if training:
        m = n * h * w
        if m < 2:
            raise DegenerateVarianceError(
                f"batchnorm needs >= 2 elements per channel in training mode, got {m}")
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        y = g * xhat + beta.reshape(1, c, 1, 1)
        cache = ("train", xhat, inv, gamma, m)
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        y = g * xhat + beta.reshape(1, c, 1, 1)
        cache = ("infer", xhat, inv, gamma, None)
    return y.astype(x.dtype, copy=False), cache


def batchnorm_backward(dy, cache):
    mode, xhat, inv, gamma, m = cache
    c = xhat.shape[1]
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma.reshape(1, c, 1, 1)
    if mode == "infer":
        dx = dxhat * inv.reshape(1, c, 1, 1)
        return dx, dgamma, dbeta
    # full training-mode gradient through the batch statistics
    inv4 = inv.reshape(1, c, 1, 1)
    sum_dxhat = dxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
    dx = (inv4 / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return dx.astype(dy.dtype, copy=False), dgamma, dbeta


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0), (x > 0)


def relu_backward(dy, cache):
    return dy * cache


def sigmoid_forward(x):
    # numerically stable split over sign
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return y, y


def sigmoid_backward(dy, cache):
    y = cache
    return dy * y * (1.0 - y)


def softmax_forward(x, axis=-1):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    return p, (p, axis)


def softmax_backward(dy, cache):
    p, axis = cache
    return p * (dy - (dy * p).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# Dropout (inverted scaling)
# ---------------------------------------------------------------------------

def dropout_forward(x, rate, rng, training=True):
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x.copy(), None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    scale = x.dtype.type(1.0 / (1.0 - rate))
    return x * keep * scale, (keep, scale)


def dropout_backward(dy, cache):
    if cache is None:
        return dy.copy()
    keep, scale = cache
    return dy * keep * scale
