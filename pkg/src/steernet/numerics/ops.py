"""Differentiable operations over :class:`Tensor`.

Each op computes its forward with numpy (or a fused kernel) and registers a
closure that maps the output gradient to one gradient per parent. Gradients
are only materialized for parents that require them, so ops over frozen
weights cost a single backward product.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigError, NumericError, ShapeError
from . import kernels
from .tensor import Tensor, add_flops, make_output

_NEG_INF = -1e30


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return make_output(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return make_output(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return make_output(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_output(out, (a, b), bw)


def neg(a):
    return make_output(-a.data, (a,), lambda g: (-g,))


def power(a, p: float):
    out = a.data ** p

    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return make_output(out, (a,), bw)


def exp(a):
    out = np.exp(a.data)
    return make_output(out, (a,), lambda g: (g * out,))


def log(a):
    return make_output(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return make_output(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a):
    out = np.tanh(a.data)
    return make_output(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    mask = a.data > 0
    return make_output(a.data * mask, (a,), lambda g: (g * mask,))


def abs(a):  # noqa: A001 - mirrors numpy naming
    sign = np.sign(a.data)
    return make_output(np.abs(a.data), (a,), lambda g: (g * sign,))


def gelu(a):
    """Tanh-approximated GELU."""
    return make_output(kernels.gelu_fwd(a.data), (a,), lambda g: (kernels.gelu_bwd(a.data, g),))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


# -- reductions and shape ------------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return make_output(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape):
    out = a.data.reshape(shape)
    return make_output(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    inv = None if axes is None else tuple(np.argsort(axes))
    return make_output(out, (a,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def _is_basic(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def index(a, idx):
    out = np.ascontiguousarray(a.data[idx])
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_output(out, (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        parts = np.split(g, sizes, axis=axis)
        return tuple(np.ascontiguousarray(p) if t.requires_grad else None
                     for p, t in zip(parts, tensors))

    return make_output(out, tuple(tensors), bw)


def stack(tensors, axis=0):
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis)


# -- linear algebra ------------------------------------------------------------

def matmul(a, b):
    """Batched matrix product ``a @ b``; records 2*m*n*k FLOPs per product."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    batch = int(np.prod(out.shape[:-2])) if out.ndim > 2 else 1
    flops = 2 * batch * m * n * k
    add_flops(flops)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
            add_flops(flops)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            add_flops(flops)
        return ga, gb

    return make_output(out, (a, b), bw)


def linear(x, w, b=None):
    """``x @ w + b`` over the last axis of ``x`` (w is in x out)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out += b.data
    flops = 2 * x2.shape[0] * w.shape[0] * w.shape[1]
    add_flops(flops)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = gw = None
        if x.requires_grad:
            gx = (g2 @ w.data.T).reshape(x.shape)
            add_flops(flops)
        if w.requires_grad:
            gw = x2.T @ g2
            add_flops(flops)
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    return make_output(out.reshape(lead + (w.shape[1],)), parents, bw)


def embedding(ids, weight):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range [0, {weight.shape[0]})")
    out = weight.data[ids]

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return make_output(out, (weight,), bw)


# -- normalization, softmax, losses --------------------------------------------

def softmax(x, axis=-1):
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax input contains NaN/Inf")
    moved = np.moveaxis(x.data, axis, -1)
    shp = moved.shape
    y = kernels.softmax_fwd(np.ascontiguousarray(moved).reshape(-1, shp[-1])).reshape(shp)

    def bw(g):
        gm = np.ascontiguousarray(np.moveaxis(g, axis, -1)).reshape(-1, shp[-1])
        dx = kernels.softmax_bwd(y.reshape(-1, shp[-1]), gm).reshape(shp)
        return (np.ascontiguousarray(np.moveaxis(dx, -1, axis)),)

    return make_output(np.ascontiguousarray(np.moveaxis(y, -1, axis)), (x,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    if not eps > 0:
        raise ConfigError(f"layer_norm eps must be > 0, got {eps}")
    d = x.shape[-1]
    if d < 1:
        raise ShapeError("layer_norm over an empty axis")
    x2 = x.data.reshape(-1, d)
    y, mu, rstd = kernels.layer_norm_fwd(x2, gain.data, bias.data, float(eps))

    def bw(g):
        dx, dg, db = kernels.layer_norm_bwd(np.ascontiguousarray(g.reshape(-1, d)), x2, mu, rstd, gain.data)
        return (dx.reshape(x.shape) if x.requires_grad else None,
                dg if gain.requires_grad else None,
                db if bias.requires_grad else None)

    return make_output(y.reshape(x.shape), (x, gain, bias), bw)


def cross_entropy(logits, targets, mask=None):
    """Mean next-token NLL over unmasked positions.

    ``logits`` has shape (..., V); ``targets`` the leading shape; ``mask`` is a
    boolean/0-1 array of the leading shape selecting the positions that count.
    """
    v = logits.shape[-1]
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    l2 = logits.data.reshape(-1, v)
    if targets.shape[0] != l2.shape[0]:
        raise ShapeError(f"{targets.shape[0]} targets for {l2.shape[0]} logit rows")
    w = np.ones(l2.shape[0], dtype=l2.dtype) if mask is None else np.asarray(mask, dtype=l2.dtype).reshape(-1)
    count = float(w.sum())
    if count <= 0:
        raise ValueError("cross_entropy: every position is masked; mean is undefined")
    nll, probs = kernels.xent_fwd(np.ascontiguousarray(l2), np.ascontiguousarray(targets))
    loss = np.asarray((nll.astype(np.float64) * w).sum() / count, dtype=l2.dtype)

    def bw(g):
        d = probs.copy()
        d[np.arange(d.shape[0]), targets] -= 1.0
        d *= (w * (float(g) / count))[:, None]
        return (d.reshape(logits.shape),)

    return make_output(loss, (logits,), bw)


def attention(q, k, v, causal=False, key_mask=None, return_weights=False):
    """Scaled dot-product attention over (B, H, T, dh) queries, (B, H, S, dh) keys/values.

    ``causal`` aligns the last query with the last key. ``key_mask`` is a (B, S)
    boolean array marking valid keys. Returns the (B, H, T, dh) output and,
    when asked, the (B, H, T, S) weight array.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention shapes q{q.shape} k{k.shape} v{v.shape}")
    bsz, nh, t, dh = q.shape
    s = k.shape[2]
    scale = 1.0 / math.sqrt(dh)
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2))
    scores *= scale
    if causal:
        allowed = np.arange(s)[None, :] <= np.arange(t)[:, None] + (s - t)
        scores = np.where(allowed, scores, _NEG_INF).astype(q.dtype, copy=False)
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)[:, None, None, :]
        scores = np.where(km, scores, _NEG_INF).astype(q.dtype, copy=False)
    probs = kernels.softmax_fwd(np.ascontiguousarray(scores).reshape(-1, s)).reshape(scores.shape)
    out = np.matmul(probs, v.data)
    flops = 2 * bsz * nh * t * s * dh
    add_flops(2 * flops)

    def bw(g):
        gq = gk = gv = None
        if v.requires_grad:
            gv = np.matmul(np.swapaxes(probs, -1, -2), g)
            add_flops(flops)
        dp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        add_flops(flops)
        ds = kernels.softmax_bwd(probs.reshape(-1, s), np.ascontiguousarray(dp).reshape(-1, s)).reshape(probs.shape)
        ds *= scale
        if q.requires_grad:
            gq = np.matmul(ds, k.data)
            add_flops(flops)
        if k.requires_grad:
            gk = np.matmul(np.swapaxes(ds, -1, -2), q.data)
            add_flops(flops)
        return gq, gk, gv

    out_t = make_output(out, (q, k, v), bw)
    if return_weights:
        return out_t, probs
    return out_t


# -- vector helpers ------------------------------------------------------------

def l2_normalize(x, axis=-1, tol=1e-12):
    """Scale ``x`` to unit L2 norm along ``axis``; zero vectors raise NumericError."""
    n2 = x.data.astype(np.float64) ** 2
    norms = np.sqrt(n2.sum(axis=axis, keepdims=True))
    if np.any(norms <= tol):
        raise NumericError("cannot normalize a zero vector")
    norm = sqrt(sum(x * x, axis=axis, keepdims=True))
    return x / norm


def cosine_similarity(a, b, axis=-1, eps=1e-24):
    """Cosine along ``axis``; ``eps`` under the root keeps a zero operand finite (cosine 0)."""
    num = sum(a * b, axis=axis)
    den = sqrt(sum(a * a, axis=axis) * sum(b * b, axis=axis) + eps)
    return num / den
