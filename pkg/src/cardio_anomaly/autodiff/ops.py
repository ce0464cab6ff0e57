"""Differentiable primitives.

Conventions:

* Elementwise binary ops broadcast like numpy.
* ``conv1d`` works on ``(batch, channels, length)`` with weights of shape
  ``(out_channels, in_channels, kernel)``; it is a cross-correlation, as in
  most deep-learning frameworks.
* ``matmul`` follows ``np.matmul``: leading axes broadcast, the last two are
  the matrix axes.
* Subgradients at kinks are 0 (``relu`` at 0, ``maximum`` ties go to the
  first operand).
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf

from .tensor import ShapeError, Tensor, as_tensor, grad_enabled, unbroadcast


def _needs_grad(*ts: Tensor) -> bool:
    return grad_enabled() and any(t.requires_grad for t in ts)


def _make(data, parents, backward) -> Tensor:
    if _needs_grad(*parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _broadcast_shape(op, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def backward(g):
        return (
            unbroadcast(g / b.data, a.shape),
            unbroadcast(-g * out / b.data, b.shape),
        )

    return _make(out, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    """``a ** exponent`` for a constant exponent.

    For non-integer exponents the base is expected to be non-negative; the
    derivative at a zero base is taken as 0.
    """
    a = as_tensor(a)
    p = float(exponent)
    out = np.power(a.data, p)

    def backward(g):
        if p == 0.0:
            return (np.zeros_like(a.data),)
        if p >= 1.0 or float(p).is_integer():
            d = p * np.power(a.data, p - 1.0)
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                d = np.where(a.data > 0, p * np.power(np.where(a.data > 0, a.data, 1.0), p - 1.0), 0.0)
        return (g * d,)

    return _make(out, (a,), backward)


def square(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (2.0 * a.data * g,)

    return _make(a.data * a.data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward)


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("maximum", a, b)
    take_a = a.data >= b.data

    def backward(g):
        return (
            unbroadcast(np.where(take_a, g, 0.0), a.shape),
            unbroadcast(np.where(take_a, 0.0, g), b.shape),
        )

    return _make(np.maximum(a.data, b.data), (a, b), backward)


# -- activations -------------------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0), (a,), backward)


_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _SQRT1_2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (cdf + a.data * pdf),)

    return _make(a.data * cdf, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), backward)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ez = np.exp(x[~pos])
        s[~pos] = ez / (1.0 + ez)
        return (g * s,)

    return _make(out, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), backward)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis (no affine part, see ``nn.LayerNorm``)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (a,), backward)


# -- reductions ----------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)

    def backward(g):
        return (np.array(_expand_reduced(g, a.shape, axis, keepdims)),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // (np.size(out) or 1)

    def backward(g):
        return (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,)

    return _make(out, (a,), backward)


def max(a, axis: int = -1) -> Tensor:  # noqa: A001
    """Max over one axis; ties send the gradient to the first maximiser."""
    a = as_tensor(a)
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(np.squeeze(out, axis=axis), (a,), backward)


# -- shape manipulation ------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(out, (a,), backward)


def slice(a, index) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(out, (a,), backward)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError("concat", ts[0].shape, t.shape)
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [np.s_[:]] * g.ndim
            sl[ax] = np.s_[lo:hi]
            out.append(g[tuple(sl)])
        return tuple(out)

    return _make(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), backward)


def upsample(a, factor: int) -> Tensor:
    """Nearest-neighbour upsampling along the last axis."""
    a = as_tensor(a)
    out = np.repeat(a.data, factor, axis=-1)

    def backward(g):
        return (g.reshape(*a.shape, factor).sum(axis=-1),)

    return _make(out, (a,), backward)


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward)


def conv1d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D cross-correlation of ``x`` (B, C_in, L) with ``weight`` (C_out, C_in, K)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv1d", x.shape, weight.shape)
    bsz, c_in, length = x.shape
    c_out, _, k = weight.shape
    lp = length + 2 * padding
    if lp < k:
        raise ShapeError("conv1d (input shorter than kernel)", x.shape, weight.shape)
    l_out = (lp - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    xp = np.ascontiguousarray(xp)
    s0, s1, s2 = xp.strides
    cols = as_strided(xp, shape=(bsz, l_out, c_in, k), strides=(s0, stride * s2, s1, s2))
    cols2 = cols.reshape(bsz * l_out, c_in * k)
    w2 = weight.data.reshape(c_out, c_in * k)
    out = (cols2 @ w2.T).reshape(bsz, l_out, c_out).transpose(0, 2, 1)
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None]
        parents = (x, weight, bias)
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 1).reshape(bsz * l_out, c_out)
        gw = (g2.T @ cols2).reshape(c_out, c_in, k) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            # (B, C_in, K, L_out) so each tap's slice is contiguous
            gcols = np.ascontiguousarray((g2 @ w2).reshape(bsz, l_out, c_in, k).transpose(0, 2, 3, 1))
            gxp = np.zeros((bsz, c_in, lp))
            span = stride * (l_out - 1) + 1
            for j in range(k):
                gxp[:, :, j : j + span : stride] += gcols[:, :, j, :]
            gx = gxp[:, :, padding : padding + length] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    return _make(out, parents, backward)


def attention(query, key, value, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention on already projected inputs.

    ``query`` is (B, Tq, E); ``key`` and ``value`` are (B, Tk, E).  ``E`` is
    split into ``heads`` equal slices, each attended independently, and the
    per-head outputs are concatenated back to width ``E``.
    """
    q, k, v = as_tensor(query), as_tensor(key), as_tensor(value)
    if q.ndim != 3 or k.shape != v.shape or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise ShapeError("attention", q.shape, k.shape, v.shape)
    bsz, tq, e = q.shape
    tk = k.shape[1]
    if heads < 1 or e % heads:
        raise ShapeError(f"attention (embed dim not divisible by {heads} heads)", q.shape)
    dh = e // heads

    def split(t: Tensor, n: int) -> Tensor:
        return transpose(reshape(t, (bsz, n, heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = split(q, tq), split(k, tk), split(v, tk)
    scores = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=-1)
    out = matmul(weights, vh)
    return reshape(transpose(out, (0, 2, 1, 3)), (bsz, tq, e))


def attention_weights(query, key, heads: int) -> np.ndarray:
    """Per-head attention weights (B, heads, Tq, Tk), no graph."""
    q, k = _as_np(query), _as_np(key)
    bsz, tq, e = q.shape
    dh = e // heads
    qh = q.reshape(bsz, tq, heads, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(bsz, k.shape[1], heads, dh).transpose(0, 2, 1, 3)
    z = qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(dh)
    z = z - z.max(axis=-1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=-1, keepdims=True)


def _as_np(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
