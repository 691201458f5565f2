"""Differentiable operation catalog.

Every function here computes forward values in float64 and, when a tape is
active, records an analytic backward closure.  Summation order inside each
op is fixed, so repeated runs are bit-identical.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ShapeMismatch
from .tensor import Tensor, apply_op, wrap, _unbroadcast

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _gelu_deriv(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


# --- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = wrap(a), wrap(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply_op("add", out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = wrap(a), wrap(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return apply_op("sub", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = wrap(a), wrap(b)
    out = a.data * b.data

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return apply_op("mul", out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = wrap(a), wrap(b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return apply_op("div", out, (a, b), bw)


def scale(x, c: float) -> Tensor:
    x = wrap(x)
    c = float(c)

    def bw(g):
        return (g * c,)

    return apply_op("scale", x.data * c, (x,), bw)


def neg(x) -> Tensor:
    x = wrap(x)

    def bw(g):
        return (-g,)

    return apply_op("neg", -x.data, (x,), bw)


# --- nonlinearities ---------------------------------------------------------

def relu(x) -> Tensor:
    x = wrap(x)
    mask = x.data > 0.0  # subgradient at 0 is 0

    def bw(g):
        return (g * mask,)

    return apply_op("relu", x.data * mask, (x,), bw)


def gelu(x) -> Tensor:
    x = wrap(x)
    xd = x.data
    out = 0.5 * xd * (1.0 + erf(xd * _INV_SQRT2))

    def bw(g):
        return (g * _gelu_deriv(xd),)

    return apply_op("gelu", out, (x,), bw)


def sqrt(x) -> Tensor:
    x = wrap(x)
    y = np.sqrt(x.data)

    def bw(g):
        # zero subgradient at 0, mirroring the ReLU convention
        return (np.where(y > 0.0, 0.5 * g / np.where(y > 0.0, y, 1.0), 0.0),)

    return apply_op("sqrt", y, (x,), bw)


def absval(x) -> Tensor:
    x = wrap(x)
    s = np.sign(x.data)

    def bw(g):
        return (g * s,)

    return apply_op("abs", np.abs(x.data), (x,), bw)


def maximum_scalar(x, c: float) -> Tensor:
    x = wrap(x)
    c = float(c)
    mask = x.data > c

    def bw(g):
        return (g * mask,)

    return apply_op("maximum_scalar", np.maximum(x.data, c), (x,), bw)


# --- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = wrap(a), wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return apply_op("matmul", out, (a, b), bw)


def linear(x, w, b) -> Tensor:
    """Affine map over the last axis: x @ w + b."""
    return add(matmul(x, w), b)


def conv2d(x, w, b: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """2-D convolution; kernel 1x1 or 3x3, stride 1 or 2, zero padding
    (k-1)//2 so spatial size is preserved (stride 1) or halved (stride 2)."""
    x, w = wrap(x), wrap(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch("conv2d expects 4-D input and weight")
    n_out, c_in, kh, kw = w.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeMismatch(f"unsupported kernel {kh}x{kw}")
    if stride not in (1, 2):
        raise ShapeMismatch(f"unsupported stride {stride}")
    bsz, c, h, wd = x.shape
    if c != c_in:
        raise ShapeMismatch(f"conv2d channels: input {c}, weight expects {c_in}")
    pad = (kh - 1) // 2
    out_h = (h + 2 * pad - kh) // stride + 1
    out_w = (wd + 2 * pad - kw) // stride + 1
    n_loc = out_h * out_w

    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x.data
    cols = np.empty((bsz, c, kh * kw, n_loc), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride]
            cols[:, :, i * kw + j, :] = patch.reshape(bsz, c, n_loc)
    cols_flat = cols.reshape(bsz, c * kh * kw, n_loc)
    w_flat = w.data.reshape(n_out, c * kh * kw)
    out = np.matmul(w_flat[None], cols_flat).reshape(bsz, n_out, out_h, out_w)
    operands = [x, w]
    if b is not None:
        b = wrap(b)
        if b.shape != (n_out,):
            raise ShapeMismatch(f"conv2d bias shape {b.shape}, expected ({n_out},)")
        out = out + b.data.reshape(1, n_out, 1, 1)
        operands.append(b)

    def bw(g):
        gf = g.reshape(bsz, n_out, n_loc)
        gw = np.matmul(gf, cols_flat.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gcols = np.matmul(w_flat.T[None], gf).reshape(bsz, c, kh * kw, n_loc)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * out_h:stride,
                    j:j + stride * out_w:stride] += \
                    gcols[:, :, i * kw + j, :].reshape(bsz, c, out_h, out_w)
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return apply_op("conv2d", out, tuple(operands), bw)


# --- reductions -------------------------------------------------------------

def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def _expand(g: np.ndarray, axes: tuple[int, ...], keepdims: bool) -> np.ndarray:
    return g if keepdims else np.expand_dims(g, axes)


def mean(x, axes=None, keepdims: bool = False) -> Tensor:
    x = wrap(x)
    axes_t = _norm_axes(axes, x.data.ndim)
    n = int(np.prod([x.shape[a] for a in axes_t])) if axes_t else 1
    out = x.data.mean(axis=axes_t or None, keepdims=keepdims)

    def bw(g):
        return (np.broadcast_to(_expand(g, axes_t, keepdims), x.shape) / n,)

    return apply_op("mean", out, (x,), bw)


def tsum(x, axes=None, keepdims: bool = False) -> Tensor:
    x = wrap(x)
    axes_t = _norm_axes(axes, x.data.ndim)
    out = x.data.sum(axis=axes_t or None, keepdims=keepdims)

    def bw(g):
        return (np.broadcast_to(_expand(g, axes_t, keepdims), x.shape).copy(),)

    return apply_op("sum", out, (x,), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return ((g - (g * y).sum(axis=axis, keepdims=True)) * y,)

    return apply_op("softmax", y, (x,), bw)


def cross_entropy_sum(logits, targets: np.ndarray) -> Tensor:
    """Summed cross-entropy of class maps.

    ``logits`` is (batch, classes, H, W); ``targets`` an integer (batch, H, W)
    map.  Returns the scalar sum of -log p[target] over every cell.
    """
    logits = wrap(logits)
    if logits.data.ndim != 4:
        raise ShapeMismatch("cross_entropy_sum expects (B,K,H,W) logits")
    targets = np.asarray(targets)
    if targets.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeMismatch(
            f"targets shape {targets.shape} does not match logits {logits.shape}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, targets[:, None], axis=1)
    out = np.asarray(-picked.sum())

    def bw(g):
        p = np.exp(logp)
        picked_p = np.take_along_axis(p, targets[:, None], axis=1)
        np.put_along_axis(p, targets[:, None], picked_p - 1.0, axis=1)
        return (g * p,)

    return apply_op("cross_entropy_sum", out, (logits,), bw)


# --- shape manipulation -----------------------------------------------------

def reshape(x, shape: Sequence[int]) -> Tensor:
    x = wrap(x)
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return apply_op("reshape", out, (x,), bw)


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = wrap(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return apply_op("transpose", np.transpose(x.data, axes), (x,), bw)


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of a (B,C,H,W) map."""
    x = wrap(x)
    if x.data.ndim != 4:
        raise ShapeMismatch("upsample2x expects a 4-D map")
    bsz, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(bsz, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return apply_op("upsample2x", out, (x,), bw)


def slice_channels(x, start: int, stop: int) -> Tensor:
    """Contiguous channel-range view of a (B,C,...) tensor."""
    x = wrap(x)
    if not (0 <= start < stop <= x.shape[1]):
        raise ShapeMismatch(f"channel slice [{start}:{stop}) of {x.shape}")
    out = x.data[:, start:stop].copy()

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return apply_op("slice_channels", out, (x,), bw)


def concat_channels(parts: Sequence) -> Tensor:
    parts = [wrap(p) for p in parts]
    if any(p.data.ndim != parts[0].data.ndim for p in parts):
        raise ShapeMismatch("concat_channels rank mismatch")
    sizes = [p.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return apply_op("concat_channels", out, tuple(parts), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Layer normalization over ``axis`` (the channel axis) with affine
    parameters; fused analytic backward."""
    x, gain, bias = wrap(x), wrap(gain), wrap(bias)
    ax = axis % x.data.ndim
    n = x.shape[ax]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeMismatch(
            f"layer_norm affine params must be ({n},), got {gain.shape}/{bias.shape}")
    bshape = tuple(n if i == ax else 1 for i in range(x.data.ndim))
    gain_b = gain.data.reshape(bshape)
    mu = x.data.mean(axis=ax, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain_b + bias.data.reshape(bshape)
    reduce_axes = tuple(i for i in range(x.data.ndim) if i != ax)

    def bw(g):
        ghat = g * gain_b
        gx = inv * (ghat - ghat.mean(axis=ax, keepdims=True)
                    - xhat * (ghat * xhat).mean(axis=ax, keepdims=True))
        ggain = (g * xhat).sum(axis=reduce_axes)
        gbias = g.sum(axis=reduce_axes)
        return gx, ggain, gbias

    return apply_op("layer_norm", out, (x, gain, bias), bw)
