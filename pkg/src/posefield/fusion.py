"""Per-query feature fusion of the global, voxel and pixel-aligned features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .autodiff import MLP, LayerNorm, Module, MultiHeadAttention, Tensor, as_tensor, functional as F
from .body import BoneTransforms
from .camera import Camera, project_tensor
from .deformation import forward_deform
from .encoder import FEATURE_CHANNELS, IMAGE_CHANNELS, FeatureMap, sample_featuremap
from .motion_weights import GridSpec

POS_FREQS = 4
DIR_FREQS = 2


def positional_encode(v, n_freq: int) -> Tensor:
    """[v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(n-1) pi v), cos(2^(n-1) pi v)] along the last axis."""
    if n_freq < 0:
        raise ValueError("n_freq must be non-negative")
    v = as_tensor(v)
    parts = [v]
    for j in range(n_freq):
        s = F.mul(v, float(2 ** j * np.pi))
        parts += [F.sin(s), F.cos(s)]
    return F.concat(parts, axis=-1) if n_freq else v


def encoded_size(d: int, n_freq: int) -> int:
    return d * (1 + 2 * n_freq)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def to_canonical_dirs(dirs: np.ndarray, weights: np.ndarray, transforms: BoneTransforms) -> np.ndarray:
    """Rotate posed-space directions (N, 3) into canonical space with the
    weight-blended bone rotation, renormalised."""
    blended = np.einsum("nk,kab->nab", weights, transforms.R)
    return _unit(np.einsum("nab,nb->na", blended, dirs))


@dataclass
class QueryContext:
    """Constant per-query side information, all (N, ...) arrays."""

    x_c: np.ndarray
    view_dir: np.ndarray
    joint_vector: np.ndarray
    weights: np.ndarray
    observed_dirs: List[np.ndarray]
    available: np.ndarray  # (N, T)

    def encoded(self, box) -> np.ndarray:
        """Positional context vector shared by every token."""
        xn = 2.0 * (self.x_c - box.lo) / box.size - 1.0
        parts = [positional_encode(xn, POS_FREQS).data, positional_encode(self.view_dir, DIR_FREQS).data,
                 positional_encode(self.joint_vector, POS_FREQS).data, np.asarray(self.weights)]
        return np.concatenate(parts, axis=1)


def context_size(joint_count: int) -> int:
    return encoded_size(3, POS_FREQS) * 2 + encoded_size(3, DIR_FREQS) + joint_count


def extract_pixel_features(fmap: FeatureMap, x_c, transforms: BoneTransforms, camera: Camera, W,
                           spec: GridSpec):
    """Pixel-aligned features of canonical points in one observed view.

    Returns (features (N, C), available (N,), posed points x_o (N, 3) array).
    Unavailable points (out of frustum or free space) get zero features.
    """
    x_o, free = forward_deform(x_c, transforms, W, spec, return_free=True)
    uv, ok = project_tensor(x_o, fmap.intr, camera.extr)
    avail = ok & ~free
    feats = sample_featuremap(fmap, uv)
    return F.mul(feats, avail[:, None].astype(feats.dtype)), avail, x_o.data


class EncoderLayer(Module):
    """Post-norm transformer encoder layer over a token list."""

    def __init__(self, dim: int, heads: int, hidden: int, rng: np.random.Generator):
        self.att = MultiHeadAttention(dim, heads, rng)
        self.ln1 = LayerNorm(dim)
        self.ff = MLP([dim, hidden, dim], rng)
        self.ln2 = LayerNorm(dim)

    def __call__(self, tokens: Sequence[Tensor], mask: Optional[np.ndarray]) -> List[Tensor]:
        att = self.att(tokens, tokens, mask)
        h = [self.ln1(F.add(t, a)) for t, a in zip(tokens, att)]
        return [self.ln2(F.add(x, self.ff(x))) for x in h]


class FeatureFusion(Module):
    """Tokens for the global, voxel and per-view pixel features, one
    transformer layer, then attention read-out with a context query."""

    def __init__(self, joint_count: int, rng: np.random.Generator, dim: int = 64, hidden: int = 128,
                 heads: int = 4):
        ctx = context_size(joint_count)
        obs = encoded_size(3, DIR_FREQS)
        self.align_coarse = MLP([FEATURE_CHANNELS + ctx, hidden, dim], rng)
        self.align_pixel = MLP([FEATURE_CHANNELS + IMAGE_CHANNELS + ctx + obs, hidden, dim], rng)
        self.encoder = EncoderLayer(dim, heads, hidden, rng)
        self.query = MLP([ctx, hidden, dim], rng)
        self.readout = MultiHeadAttention(dim, heads, rng, out_proj=False)
        self.dim = dim

    def tokens(self, f_glob, f_vox, f_pix: Sequence[Tensor], ctx: np.ndarray,
               observed_dirs: Sequence[np.ndarray]) -> List[Tensor]:
        dt = as_tensor(f_vox).dtype
        c = ctx.astype(dt)
        toks = [self.align_coarse(F.concat([f_glob, c], axis=1)), self.align_coarse(F.concat([f_vox, c], axis=1))]
        for f, d in zip(f_pix, observed_dirs):
            od = positional_encode(d, DIR_FREQS).data.astype(dt)
            toks.append(self.align_pixel(F.concat([f, c, od], axis=1)))
        return toks

    def __call__(self, f_glob, f_vox, f_pix: Sequence[Tensor], available: np.ndarray, ctx: np.ndarray,
                 observed_dirs: Sequence[np.ndarray]) -> Tensor:
        """Fused (N, dim) features. ``available`` is (N, T) over the pixel tokens."""
        toks = self.tokens(f_glob, f_vox, f_pix, ctx, observed_dirs)
        n = toks[0].shape[0]
        avail = np.asarray(available, dtype=bool).reshape(n, len(f_pix))
        mask = np.concatenate([np.ones((n, 2), dtype=bool), avail], axis=1)
        h = self.encoder(toks, mask)
        q = self.query(ctx.astype(toks[0].dtype))
        return self.readout([q], h, mask)[0]
