"""Differentiable operators on :class:`~smaformer.tensor.Tensor`.

Image ops accept ``C x H x W`` or batched ``B x C x H x W`` inputs and return
the same rank. Convolutions use the cross-correlation convention with zero
padding and are implemented with strided window views plus BLAS contractions.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import ShapeError, Tensor, make_result, reshape, transpose

# Differentiable ops that the gradient-check suite must cover, by tape name.
DIFFERENTIABLE_OPS = (
    "add", "sub", "mul", "div", "neg", "exp", "log", "clip", "matmul", "reshape",
    "transpose", "concat", "sum", "mean", "max", "linear", "conv2d",
    "conv_transpose2d", "depthwise_conv2d", "layer_norm", "relu", "gelu",
    "sigmoid", "softmax",
)


class ConfigError(ValueError):
    """Invalid layer configuration (kernel size, stride, channel counts)."""


def _batched(x: Tensor, name: str) -> tuple:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{name}: expected C x H x W or B x C x H x W, got {x.shape}")


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


# --- dense layers -----------------------------------------------------------


def linear(x: Tensor, w: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ w + bias`` over the last axis of ``x``; ``w`` is ``d_in x d_out``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if bias is not None and bias.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, wd.shape[0])
    out = x2 @ wd
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (wd.shape[1],))

    def vjp(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    inputs = (x, w) if bias is None else (x, w, bias)
    return make_result("linear", out, inputs, vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row (last axis) to zero mean and unit variance, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def vjp(g):
        axes = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return make_result("layer_norm", out, (x, gamma, beta), vjp)


# --- activations -------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    # maximum (not where) so NaN inputs stay NaN and divergence is not masked
    return make_result("relu", np.maximum(x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF (no tanh approximation)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = (xd * cdf).astype(x.dtype)

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return make_result("gelu", out, (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # Split by sign so exp never overflows.
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return make_result("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    if not -xd.ndim <= axis < xd.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", out, (x,), vjp)


# --- convolutions ---------------------------------------------------------------


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``w`` is ``C_out x C_in x k x k``."""
    xb, squeeze = _batched(x, "conv2d")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ConfigError(f"conv2d: weight must be C_out x C_in x k x k, got {w.shape}")
    c_out, c_in, k, _ = w.shape
    b, c, h, wd_ = xb.shape
    if c != c_in:
        raise ShapeError(f"conv2d: input has {c} channels, weight {w.shape} expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {c_out} output channels")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: bad stride={stride} / padding={padding}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(wd_, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d: output size {ho}x{wo} < 1 for input {h}x{wd_}, "
                          f"k={k}, stride={stride}, padding={padding}")
    xd, wt = xb.data, w.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    # Columns are laid out B x (C_in*k*k) x (Ho*Wo) so the product lands in NCHW order.
    if k == 1:
        cols = np.ascontiguousarray(xp[:, :, ::stride, ::stride][:, :, :ho, :wo]).reshape(b, c_in, -1)
    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c_in * k * k, ho * wo)
    wmat = wt.reshape(c_out, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(b, c_out, ho, wo)

    def vjp(g):
        g3 = g.reshape(b, c_out, ho * wo)
        gw = None
        if w.requires_grad:
            # Per-sample products read ``cols`` in place; tensordot would copy it.
            gw = g3[0] @ cols[0].T
            for i in range(1, b):
                gw += g3[i] @ cols[i].T
            gw = gw.reshape(wt.shape)
        gb = g3.sum(axis=(0, 2)) if bias is not None else None
        gx = None
        if xb.requires_grad:
            dcols = np.matmul(wmat.T, g3).reshape(b, c_in, k, k, ho, wo)
            if k == 1 and stride == 1 and not padding:
                return dcols.reshape(xd.shape), gw, gb
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + wd_] if padding else gxp
        return gx, gw, gb

    inputs = (xb, w) if bias is None else (xb, w, bias)
    res = make_result("conv2d", out, inputs, vjp)
    return _unbatch(res, squeeze)


def conv_transpose2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-2, 2x2 transposed convolution; doubles H and W exactly.

    ``w`` is ``C_in x C_out x 2 x 2``. This is the adjoint of ``conv2d`` with the
    same weight array, kernel 2 and stride 2.
    """
    if w.ndim != 4 or w.shape[2:] != (2, 2):
        raise ConfigError(f"conv_transpose2d: only 2x2 kernels are supported, got {w.shape}")
    xb, squeeze = _batched(x, "conv_transpose2d")
    b, c_in, h, wd_ = xb.shape
    if c_in != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} vs weight {w.shape}")
    c_out = w.shape[1]
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv_transpose2d: bias {bias.shape} vs {c_out} outputs")
    xd, wt = xb.data, w.data
    x2 = xd.transpose(0, 2, 3, 1).reshape(-1, c_in)
    wmat = wt.reshape(c_in, c_out * 4)
    y = (x2 @ wmat).reshape(b, h, wd_, c_out, 2, 2)
    out = y.transpose(0, 3, 1, 4, 2, 5).reshape(b, c_out, 2 * h, 2 * wd_)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def vjp(g):
        g6 = g.reshape(b, c_out, h, 2, wd_, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, c_out * 4)
        gx = (g6 @ wmat.T).reshape(b, h, wd_, c_in).transpose(0, 3, 1, 2) if xb.requires_grad else None
        gw = (x2.T @ g6).reshape(wt.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    inputs = (xb, w) if bias is None else (xb, w, bias)
    return _unbatch(make_result("conv_transpose2d", out, inputs, vjp), squeeze)


def depthwise_conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
                     padding: int = 1) -> Tensor:
    """Per-channel k x k convolution (stride 1); ``w`` is ``C x 1 x k x k``."""
    xb, squeeze = _batched(x, "depthwise_conv2d")
    b, c, h, wd_ = xb.shape
    if w.ndim != 4 or w.shape[0] != c or w.shape[1] != 1 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"depthwise_conv2d: input has {c} channels, weight is {w.shape}")
    k = w.shape[2]
    ho = conv_output_size(h, k, 1, padding)
    wo = conv_output_size(wd_, k, 1, padding)
    if ho < 1 or wo < 1:
        raise ConfigError(f"depthwise_conv2d: output size {ho}x{wo} < 1")
    xd = xb.data
    kern = w.data[:, 0]
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    out = np.zeros((b, c, ho, wo), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            out += kern[:, i, j][:, None, None] * xp[:, :, i:i + ho, j:j + wo]
    if bias is not None:
        out = out + bias.data[:, None, None]

    def vjp(g):
        gx = gw = None
        if xb.requires_grad:
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + ho, j:j + wo] += kern[:, i, j][:, None, None] * g
            gx = gxp[:, :, padding:padding + h, padding:padding + wd_] if padding else gxp
        if w.requires_grad:
            gk = np.empty((c, k, k), dtype=xd.dtype)
            for i in range(k):
                for j in range(k):
                    gk[:, i, j] = (g * xp[:, :, i:i + ho, j:j + wo]).sum(axis=(0, 2, 3))
            gw = gk[:, None]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    inputs = (xb, w) if bias is None else (xb, w, bias)
    return _unbatch(make_result("depthwise_conv2d", out, inputs, vjp), squeeze)


# --- pooling and layout helpers ------------------------------------------------------


def pooled_statistics(x: Tensor) -> dict:
    """Channel average (``C``), plus channel-wise mean and max maps (``1 x H x W``).

    Batched input gives ``B x C`` and ``B x 1 x H x W``.
    """
    if x.ndim not in (3, 4) or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ShapeError(f"pooled_statistics: bad shape {x.shape}")
    c_axis = x.ndim - 3
    return {
        "channel_avg": x.mean(axis=(-2, -1)),
        "spatial_mean": x.mean(axis=c_axis, keepdims=True),
        "spatial_max": x.max(axis=c_axis, keepdims=True),
    }


def to_tokens(x: Tensor) -> Tensor:
    """``B x C x H x W`` feature map to ``B x (H*W) x C`` tokens (row-major pixels)."""
    b, c, h, w = x.shape
    return reshape(transpose(x, (0, 2, 3, 1)), (b, h * w, c))


def to_map(t: Tensor, h: int, w: int) -> Tensor:
    """Inverse of :func:`to_tokens`."""
    b, n, c = t.shape
    if n != h * w:
        raise ShapeError(f"to_map: {n} tokens cannot form a {h}x{w} map")
    return transpose(reshape(t, (b, h, w, c)), (0, 3, 1, 2))


def patchify(x: Tensor, p: int) -> Tensor:
    """``B x C x H x W`` to ``B x (H/p * W/p) x (C*p*p)`` non-overlapping patch tokens."""
    b, c, h, w = x.shape
    if h % p or w % p:
        raise ShapeError(f"patchify: {h}x{w} map not divisible by patch size {p}")
    if p == 1:
        return to_tokens(x)
    y = reshape(x, (b, c, h // p, p, w // p, p))
    y = transpose(y, (0, 2, 4, 1, 3, 5))
    return reshape(y, (b, (h // p) * (w // p), c * p * p))


def unpatchify(t: Tensor, c: int, h: int, w: int, p: int) -> Tensor:
    if p == 1:
        return to_map(t, h, w)
    b = t.shape[0]
    y = reshape(t, (b, h // p, w // p, c, p, p))
    y = transpose(y, (0, 3, 1, 4, 2, 5))
    return reshape(y, (b, c, h, w))
