"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, precision


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def _coords(size: int, max_coords: Optional[int], rng) -> np.ndarray:
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    rng = rng if rng is not None else np.random.default_rng(0)
    return np.sort(rng.choice(size, size=max_coords, replace=False))


def grad_check(function: Callable[..., Tensor], point, step: float = 1e-5,
               max_coords: Optional[int] = None, rng=None) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |analytic|).

    ``function`` maps one or more tensors to a scalar tensor; ``point`` is an
    array or a sequence of arrays. Runs in float64.
    """
    single = isinstance(point, np.ndarray) or np.isscalar(point)
    arrays = [np.array(point, dtype=np.float64)] if single else [np.array(p, dtype=np.float64) for p in point]
    with precision(np.float64):
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        out = function(*leaves)
        if out.size != 1:
            raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
        backward(out)
        worst = 0.0
        for k, leaf in enumerate(leaves):
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            idx = _coords(leaf.size, max_coords, rng)
            numeric = np.zeros(idx.size)
            flat = arrays[k].reshape(-1)
            for j, i in enumerate(idx):
                orig = flat[i]
                vals = []
                for sgn in (1.0, -1.0):
                    flat[i] = orig + sgn * step
                    args = [Tensor(a) for a in arrays]
                    vals.append(function(*args).item())
                flat[i] = orig
                numeric[j] = (vals[0] - vals[1]) / (2 * step)
            worst = max(worst, _rel_err(analytic.reshape(-1)[idx], numeric))
    return worst


def param_grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
                     max_coords: Optional[int] = 8, rng=None) -> float:
    """Gradient check of ``loss_fn()`` with respect to existing parameter tensors.

    The parameters must already hold float64 data. At most ``max_coords``
    randomly chosen coordinates are probed per parameter.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("param_grad_check requires float64 parameters")
        p.data = np.ascontiguousarray(p.data)
        p.grad = None
    with precision(np.float64):
        backward(loss_fn())
        worst = 0.0
        for p in params:
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            idx = _coords(p.size, max_coords, rng)
            numeric = np.zeros(idx.size)
            flat = p.data.reshape(-1)
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                plus = loss_fn().item()
                flat[i] = orig - step
                minus = loss_fn().item()
                flat[i] = orig
                numeric[j] = (plus - minus) / (2 * step)
            worst = max(worst, _rel_err(analytic.reshape(-1)[idx], numeric))
        for p in params:
            p.grad = None
    return worst
