"""Strided N-d convolution (cross-correlation) and its transpose.

Inputs are laid out as (batch, channels, *spatial); an unbatched
(channels, *spatial) input is accepted and returned unbatched. Filters are
(out, in, *kernel) for ``conv`` and (in, out, *kernel) for
``conv_transpose``. The spatial rank is taken from the filter.
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_result


def _tuple(v, n):
    return tuple(v) if isinstance(v, (tuple, list)) else (int(v),) * n


def _im2col(xpad: np.ndarray, kernel, stride, out) -> np.ndarray:
    nd = len(kernel)
    axes = tuple(range(2, 2 + nd))
    win = sliding_window_view(xpad, kernel, axis=axes)
    sl = (slice(None), slice(None)) + tuple(slice(0, o * s, s) for o, s in zip(out, stride))
    win = win[sl]
    # (B, C, *O, *k) -> (B, *O, C, *k)
    perm = (0,) + tuple(range(2, 2 + nd)) + (1,) + tuple(range(2 + nd, 2 + 2 * nd))
    return win.transpose(perm)


def _col2im(cols: np.ndarray, padded_shape, kernel, stride, out) -> np.ndarray:
    """Adjoint of ``_im2col``: cols is (B, *O, C, *k)."""
    nd = len(kernel)
    res = np.zeros(padded_shape, dtype=cols.dtype)
    # (B, *O, C, *k) -> (*k, B, C, *O) so each kernel offset is one contiguous block
    perm = tuple(range(2 + nd, 2 + 2 * nd)) + (0, 1 + nd) + tuple(range(1, 1 + nd))
    c = np.ascontiguousarray(cols.transpose(perm))
    for offs in itertools.product(*[range(k) for k in kernel]):
        sl = (slice(None), slice(None)) + tuple(
            slice(o, o + n * s, s) for o, n, s in zip(offs, out, stride)
        )
        res[sl] += c[offs]
    return res


def _flipped_input_grad(gd: np.ndarray, weight: np.ndarray, padding, spatial) -> np.ndarray:
    # stride-1 case: the input gradient is a full correlation of the output
    # gradient with the flipped, channel-swapped filters
    nd = gd.ndim - 2
    kernel = weight.shape[2:]
    wf = np.flip(weight, axis=tuple(range(2, 2 + nd))).swapaxes(0, 1)
    pads = [k - 1 - p for k, p in zip(kernel, padding)]
    gpad = np.pad(gd, ((0, 0), (0, 0)) + tuple((q, q) for q in pads))
    out = tuple(spatial)
    cols = _im2col(gpad, kernel, (1,) * nd, out).reshape(gd.shape[0] * int(np.prod(out)), -1)
    y = cols @ np.ascontiguousarray(wf).reshape(wf.shape[0], -1).T
    perm = (0, nd + 1) + tuple(range(1, nd + 1))
    return np.ascontiguousarray(y.reshape((gd.shape[0],) + out + (wf.shape[0],)).transpose(perm))


def conv(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation; output extent per axis is (in + 2p - k) // s + 1."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = None if bias is None else as_tensor(bias)
    nd = weight.ndim - 2
    unbatched = x.ndim == nd + 1
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != nd + 2:
        raise ValueError(f"conv: input shape {x.shape} does not match filter shape {weight.shape}")
    b, c = xd.shape[:2]
    o, ci = weight.shape[:2]
    if ci != c:
        raise ValueError(f"conv: input has {c} channels, filter expects {ci} (shapes {x.shape}, {weight.shape})")
    kernel = weight.shape[2:]
    stride, padding = _tuple(stride, nd), _tuple(padding, nd)
    spatial = xd.shape[2:]
    out = tuple((n + 2 * p - k) // s + 1 for n, p, k, s in zip(spatial, padding, kernel, stride))
    if any(n + 2 * p < k for n, p, k in zip(spatial, padding, kernel)) or any(v <= 0 for v in out):
        raise ValueError(f"conv: non-positive output extent {out} for input {x.shape} and filter {weight.shape}")
    pad = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    xpad = np.pad(xd, pad) if any(padding) else xd
    cols = _im2col(xpad, kernel, stride, out).reshape(b * int(np.prod(out)), -1)
    wm = weight.data.reshape(o, -1)
    y = cols @ wm.T
    if bias is not None:
        y = y + bias.data
    perm = (0, nd + 1) + tuple(range(1, nd + 1))
    y = y.reshape((b,) + out + (o,)).transpose(perm)
    y = np.ascontiguousarray(y[0] if unbatched else y)

    def bw(g):
        gd = g[None] if unbatched else g
        g2 = gd.transpose((0,) + tuple(range(2, 2 + nd)) + (1,)).reshape(-1, o)
        gx = gw = gb = None
        if x.requires_grad:
            if all(st == 1 for st in stride) and all(p < k for p, k in zip(padding, kernel)):
                gx = _flipped_input_grad(gd, weight.data, padding, spatial)
            else:
                gcols = (g2 @ wm).reshape((b,) + out + (c,) + kernel)
                gpad = _col2im(gcols, xpad.shape, kernel, stride, out)
                crop = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(padding, spatial))
                gx = gpad[crop]
            gx = gx[0] if unbatched else gx
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(y, parents, (lambda g: bw(g)[:2]) if bias is None else bw)


def conv_transpose(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """Transposed convolution; output extent per axis is (in - 1) * s + k - 2p."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = None if bias is None else as_tensor(bias)
    nd = weight.ndim - 2
    unbatched = x.ndim == nd + 1
    xd = x.data[None] if unbatched else x.data
    b, c = xd.shape[:2]
    ci, o = weight.shape[:2]
    if ci != c:
        raise ValueError(f"conv_transpose: input has {c} channels, filter expects {ci}")
    kernel = weight.shape[2:]
    stride, padding = _tuple(stride, nd), _tuple(padding, nd)
    spatial = xd.shape[2:]
    full = tuple((n - 1) * s + k for n, s, k in zip(spatial, stride, kernel))
    out = tuple(f - 2 * p for f, p in zip(full, padding))
    if any(v <= 0 for v in out):
        raise ValueError(f"conv_transpose: non-positive output extent {out}")
    x2 = xd.transpose((0,) + tuple(range(2, 2 + nd)) + (1,)).reshape(-1, c)
    wm = weight.data.reshape(c, -1)
    cols = (x2 @ wm).reshape((b,) + spatial + (o,) + kernel)
    yfull = _col2im(cols, (b, o) + full, kernel, stride, spatial)
    crop = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(padding, out))
    y = yfull[crop]
    if bias is not None:
        y = y + bias.data.reshape((o,) + (1,) * nd)
    y = np.ascontiguousarray(y[0] if unbatched else y)

    def bw(g):
        gd = g[None] if unbatched else g
        gfull = np.zeros((b, o) + full, dtype=gd.dtype)
        gfull[crop] = gd
        gcols = _im2col(gfull, kernel, stride, spatial).reshape(b * int(np.prod(spatial)), -1)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (gcols @ wm.T).reshape((b,) + spatial + (c,))
            gx = gx.transpose((0, nd + 1) + tuple(range(1, nd + 1)))
            gx = np.ascontiguousarray(gx[0] if unbatched else gx)
        if weight.requires_grad:
            gw = (x2.T @ gcols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gd.sum(axis=(0,) + tuple(range(2, 2 + nd)))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(y, parents, (lambda g: bw(g)[:2]) if bias is None else bw)


def upsample_nearest(x, size) -> Tensor:
    """Nearest-neighbour resize of the trailing spatial axes to ``size``."""
    x = as_tensor(x)
    nd = len(size)
    lead = x.ndim - nd
    idx = [np.minimum((np.arange(n) * x.shape[lead + i]) // n, x.shape[lead + i] - 1) for i, n in enumerate(size)]
    grids = np.ix_(*idx)
    key = (Ellipsis,) + grids
    out = x.data[key]

    def bw(g):
        z = np.zeros_like(x.data)
        np.add.at(z, key, g)
        return (z,)

    return make_result(np.ascontiguousarray(out), (x,), bw)


def max_pool_mask(mask: np.ndarray, factor: int = 2) -> np.ndarray:
    """Downsample a boolean (..., d, h, w) mask by ``factor`` (ceil): a coarse
    cell is valid if any of its fine cells is."""
    m = np.asarray(mask, dtype=bool)
    f = factor
    *lead, d, h, w = m.shape
    pads = [(0, 0)] * len(lead) + [(0, (-n) % f) for n in (d, h, w)]
    m = np.pad(m, pads)
    d2, h2, w2 = m.shape[-3] // f, m.shape[-2] // f, m.shape[-1] // f
    return m.reshape(*lead, d2, f, h2, f, w2, f).any(axis=(-5, -3, -1))
