"""Multilinear interpolation of channel grids at continuous coordinates.

Coordinates are in index units along each spatial axis (sample ``i`` sits
at coordinate ``i``). Out-of-range coordinates are clamped to the border;
callers that need zero outside a domain apply their own mask. Gradients
flow to both the grid values and the coordinates (zero where clamped).
"""

from __future__ import annotations

import itertools
from typing import Optional

import numpy as np

from .tensor import Tensor, as_tensor, make_result


def _axis_setup(c: np.ndarray, n: int):
    cc = np.clip(c, 0, n - 1)
    if n == 1:
        zero = np.zeros(c.shape, dtype=np.int64)
        return zero, zero, np.zeros_like(c), np.zeros(c.shape, dtype=bool)
    i0 = np.minimum(np.floor(cc).astype(np.int64), n - 2)
    f = (cc - i0).astype(c.dtype)
    live = (c >= 0) & (c <= n - 1)
    return i0, i0 + 1, f, live


def interp(grid, coords, channels: Optional[np.ndarray] = None) -> Tensor:
    """Sample ``grid`` (C, *S) at ``coords`` (N, len(S)).

    Returns (N, C), or (N,) when ``channels`` selects one channel per point.
    """
    grid, coords = as_tensor(grid), as_tensor(coords)
    nd = grid.ndim - 1
    if coords.ndim != 2 or coords.shape[1] != nd:
        raise ValueError(f"interp: coords shape {coords.shape} does not fit grid shape {grid.shape}")
    spatial = grid.shape[1:]
    n_ch = grid.shape[0]
    c = coords.data
    setup = [_axis_setup(c[:, a], spatial[a]) for a in range(nd)]
    if channels is not None:
        channels = np.asarray(channels, dtype=np.int64)
    corners = list(itertools.product((0, 1), repeat=nd))
    values = []
    weights = []
    flat_idx = []
    strides = np.cumprod((1,) + spatial[::-1])[::-1][1:]
    for bits in corners:
        idx = tuple(setup[a][bits[a]] for a in range(nd))
        w = np.ones(c.shape[0], dtype=grid.dtype)
        for a in range(nd):
            w = w * (setup[a][2] if bits[a] else 1 - setup[a][2])
        if channels is None:
            v = grid.data[(slice(None),) + idx].T
        else:
            v = grid.data[(channels,) + idx]
        values.append(v)
        weights.append(w)
        flat_idx.append(np.sum([i * s for i, s in zip(idx, strides)], axis=0))
    out = None
    for w, v in zip(weights, values):
        term = w[:, None] * v if channels is None else w * v
        out = term if out is None else out + term
    out = np.asarray(out, dtype=grid.dtype)

    def bw(g):
        gg = gc = None
        n_cells = int(np.prod(spatial))
        if grid.requires_grad:
            flat = np.concatenate(flat_idx)
            if channels is None:
                wg = np.concatenate([w[:, None] * g for w in weights], axis=0)
                gg = np.stack(
                    [np.bincount(flat, weights=wg[:, k], minlength=n_cells) for k in range(n_ch)]
                )
            else:
                wg = np.concatenate([w * g for w in weights])
                key = np.concatenate([channels * n_cells + fi for fi in flat_idx])
                gg = np.bincount(key, weights=wg, minlength=n_ch * n_cells)
            gg = gg.reshape(grid.shape).astype(grid.dtype)
        if coords.requires_grad:
            gc = np.zeros_like(c)
            for a in range(nd):
                acc = 0
                for bits, v in zip(corners, values):
                    w = np.ones(c.shape[0], dtype=grid.dtype)
                    for b in range(nd):
                        if b != a:
                            w = w * (setup[b][2] if bits[b] else 1 - setup[b][2])
                    sign = 1.0 if bits[a] else -1.0
                    gv = (v * g).sum(axis=1) if channels is None else v * g
                    acc = acc + sign * w * gv
                gc[:, a] = np.where(setup[a][3], acc, 0)
        return gg, gc

    return make_result(out, (grid, coords), bw)
