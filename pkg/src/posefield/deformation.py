"""Blend-skinning deformations between posed and canonical space."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, as_tensor, functional as F
from .body import BoneTransforms
from .motion_weights import FREE_SPACE_EPS, GridSpec, posed_weights, sample_canonical


def backward_deform(x_p: np.ndarray, transforms: BoneTransforms, W, spec: GridSpec):
    """Posed points (N, 3) to canonical space.

    Returns (x_c Tensor (N, 3), free (N,) bool, w_p Tensor (N, K)). Free-space
    points map to the origin; callers mask them.
    """
    w, free, y = posed_weights(W, spec, x_p, transforms)
    x_c = F.sum(F.mul(F.reshape(w, w.shape + (1,)), y.astype(w.dtype)), axis=1)
    return x_c, free, w


def _inverse_rigid(x_c: Tensor, transforms: BoneTransforms) -> Tensor:
    # R_i^T (x - t_i) for every joint as a single (N, 3) @ (3, 3K) product
    R, t = transforms.R, transforms.t
    k = R.shape[0]
    stacked = np.concatenate(list(R), axis=1).astype(x_c.dtype)              # (3, 3K)
    offset = np.einsum("ka,kab->kb", t, R).reshape(1, 3 * k).astype(x_c.dtype)
    out = F.sub(F.matmul(x_c, stacked), offset)
    return F.reshape(out, (x_c.shape[0], k, 3))


def forward_deform(x_c, transforms: BoneTransforms, W, spec: GridSpec, return_free: bool = False):
    """Canonical points (N, 3) to posed space with canonical-space weights.

    Differentiable in both ``x_c`` and ``W``. With ``return_free`` also returns
    a flag for points whose canonical weights vanish (outside the box).
    """
    x_c = as_tensor(x_c)
    w = sample_canonical(W, spec, x_c)
    moved = _inverse_rigid(x_c, transforms)
    x_o = F.sum(F.mul(F.reshape(w, w.shape + (1,)), moved), axis=1)
    if return_free:
        return x_o, w.data.sum(axis=1) < FREE_SPACE_EPS
    return x_o


def cycle_residual(x_p: np.ndarray, transforms: BoneTransforms, W, spec: GridSpec) -> Tensor:
    """Squared distance between x_p and its backward-then-forward image, per point."""
    x_c, _, _ = backward_deform(x_p, transforms, W, spec)
    x_o = forward_deform(x_c, transforms, W, spec)
    diff = F.sub(x_o, np.asarray(x_p).astype(x_o.dtype))
    return F.sum(F.square(diff), axis=1)
