"""Differentiable array operations.

Every function takes tensors (or anything ``np.asarray`` accepts) and
returns a new tensor; nothing is mutated in place. Broadcasting follows the
right-aligned rule: missing axes are added on the left and extent-1 axes
stretch. Shapes that cannot be aligned this way are rejected.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, as_tensor, make_result


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------
def broadcast_shape(a: tuple, b: tuple, op: str = "op") -> tuple:
    out = []
    for i in range(1, max(len(a), len(b)) + 1):
        da = a[-i] if i <= len(a) else 1
        db = b[-i] if i <= len(b) else 1
        if da != db and da != 1 and db != 1:
            raise ValueError(f"{op}: shapes {a} and {b} do not broadcast")
        out.append(max(da, db) if da != 0 and db != 0 else 0)
    return tuple(reversed(out))


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b, op):
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape, op)
    return a, b


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, "mul")

    def bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** p

    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return make_result(out, (a,), bw)


def square(a) -> Tensor:
    a = as_tensor(a)
    return make_result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


# ---------------------------------------------------------------------------
# unary nonlinearities
# ---------------------------------------------------------------------------
def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (0.5 * g / out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    return make_result(out, (a,), lambda g: (g * (out > 0),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = (np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)).astype(x.dtype)
    return make_result(out, (a,), lambda g: (g * _sigmoid(x),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1 - out * out),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return make_result(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return make_result(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    shape = broadcast_shape(broadcast_shape(a.shape, b.shape, "where"), cond.shape, "where")

    def bw(g):
        ga = unbroadcast(np.where(cond, g, 0), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.where(cond, 0, g), b.shape) if b.requires_grad else None
        return ga, gb

    out = np.where(cond, a.data, b.data)
    return make_result(np.broadcast_to(out, shape).astype(np.result_type(a.dtype, b.dtype)), (a, b), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------
def _rowstable_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # BLAS takes a different (gemv) path for a single row; padding keeps each
    # output row bit-identical regardless of how many rows share the call.
    if a.ndim == 2 and b.ndim == 2 and a.shape[0] == 1:
        return (np.concatenate([a, np.zeros_like(a)], axis=0) @ b)[:1]
    return a @ b


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., M, K) and ``b`` of shape (K, N) or (..., K, N)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    if b.ndim == 2:
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        out = _rowstable_matmul(a2, b.data).reshape(*lead, b.shape[-1])

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return make_result(out, (a, b), bw)

    broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with weight of shape (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return make_result(np.asarray(out, dtype=a.dtype), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / max(n, 1))


def _sorted_sum(x: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    # float addition is commutative, so two terms need no ordering; short
    # axes use a min/max transposition network instead of a full sort.
    # Terms are added one by one: np.sum's blocking depends on buffer alignment.
    n = x.shape[axis]
    if n > 8:
        s = np.sort(x, axis=axis)
        items = [np.take(s, i, axis=axis) for i in range(n)]
    else:
        items = [np.take(x, i, axis=axis) for i in range(n)]
        for rnd in range(n if n > 2 else 0):
            for i in range(rnd % 2, n - 1, 2):
                lo = np.minimum(items[i], items[i + 1])
                items[i + 1] = np.maximum(items[i], items[i + 1])
                items[i] = lo
    out = items[0]
    for it in items[1:]:
        out = out + it
    return np.expand_dims(out, axis) if keepdims else out


def sum_symmetric(a, axis: int) -> Tensor:
    """Sum along ``axis`` in sorted order, so the result is bit-identical
    under any permutation of that axis."""
    a = as_tensor(a)
    axis = axis % a.ndim
    out = _sorted_sum(a.data, axis)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.dtype),)

    return make_result(np.asarray(out, dtype=a.dtype), (a,), bw)


def cumsum(a, axis: int, exclusive: bool = False) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    out = np.cumsum(a.data, axis=axis)
    if exclusive:
        out = out - a.data

    def bw(g):
        rev = np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)
        if exclusive:
            rev = rev - g
        return (rev,)

    return make_result(out, (a,), bw)


# ---------------------------------------------------------------------------
# normalisation and softmax
# ---------------------------------------------------------------------------
def softmax(a, axis: int = -1, mask: Optional[np.ndarray] = None, symmetric: bool = False) -> Tensor:
    """Softmax along ``axis``.

    ``mask`` (constant, broadcastable to ``a``) marks entries that take part;
    masked-out entries get probability exactly zero, and a slice with no
    valid entry yields all zeros. ``symmetric`` sums the normaliser in sorted
    order (permutation-exact).
    """
    a = as_tensor(a)
    axis = axis % a.ndim
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    e = np.exp(x - m)
    s = _sorted_sum(e, axis, keepdims=True) if symmetric else e.sum(axis=axis, keepdims=True)
    p = (e / np.where(s > 0, s, 1)).astype(a.dtype)

    def bw(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - inner),)

    return make_result(p, (a,), bw)


def normalize(a, axes, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance normalisation over ``axes`` (no affine)."""
    a = as_tensor(a)
    axes = _norm_axes(axes, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    mu = a.data.mean(axis=axes, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (xc * inv).astype(a.dtype)

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gy = (g * y).sum(axis=axes, keepdims=True) / n
        return ((inv * (g - gm - y * gy)).astype(a.dtype),)

    return make_result(y, (a,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    return add(mul(normalize(x, -1, eps), gamma), beta)


def group_norm(x, groups: int, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Group normalisation for (B, C, *spatial) inputs; gamma/beta have shape (C,)."""
    x = as_tensor(x)
    b, c = x.shape[:2]
    if c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
    spatial = x.shape[2:]
    xg = reshape(x, (b, groups, -1))
    y = reshape(normalize(xg, -1, eps), x.shape)
    shp = (c,) + (1,) * len(spatial)
    return add(mul(y, reshape(gamma, shp)), reshape(beta, shp))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make_result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    broadcast_shape(a.shape, tuple(shape), "broadcast_to")
    out = np.broadcast_to(a.data, shape).copy()
    return make_result(out, (a,), lambda g: (unbroadcast(g, a.shape),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer, type(Ellipsis), type(None))) for i in items)


def index(a, idx) -> Tensor:
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        z = np.zeros_like(a.data)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return make_result(np.array(out, copy=True), (a,), bw)


def take(a, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    a = as_tensor(a)
    axis = axis % a.ndim
    indices = np.asarray(indices, dtype=np.int64)
    out = np.take(a.data, indices, axis=axis)

    def bw(g):
        z = np.zeros_like(a.data)
        zm = np.moveaxis(z, axis, 0)
        np.add.at(zm, indices.reshape(-1), np.moveaxis(g, axis, 0).reshape((-1,) + zm.shape[1:]))
        return (z,)

    return make_result(out, (a,), bw)


def scatter(a, indices: np.ndarray, size: int, axis: int = 0) -> Tensor:
    """Place slices of ``a`` at ``indices`` of a zero tensor with ``size`` entries along ``axis``."""
    a = as_tensor(a)
    axis = axis % a.ndim
    indices = np.asarray(indices, dtype=np.int64)
    shape = list(a.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=a.dtype)
    om = np.moveaxis(out, axis, 0)
    np.add.at(om, indices, np.moveaxis(a.data, axis, 0))

    def bw(g):
        return (np.take(g, indices, axis=axis),)

    return make_result(out, (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat: empty input")
    ndim = ts[0].ndim
    axis = axis % ndim
    for t in ts:
        if t.ndim != ndim or any(t.shape[i] != ts[0].shape[i] for i in range(ndim) if i != axis):
            raise ValueError(f"concat: shapes {[t.shape for t in ts]} disagree off axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(out, ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ValueError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in ts], axis=axis)
    ax = axis % out.ndim

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return make_result(out, ts, bw)


def norm(a, axis: int = -1, keepdims: bool = False, eps: float = 0.0) -> Tensor:
    return sqrt(add(sum(square(a), axis=axis, keepdims=keepdims), eps))
