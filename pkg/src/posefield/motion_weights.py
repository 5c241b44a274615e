"""Discrete canonical motion-weight volumes.

A volume holds K channels (one per joint) over a regular grid spanning the
canonical skeleton box. In probability space each voxel's channels are a
point on the simplex. Sampling is trilinear between voxel centres and
returns zeros outside the box, which is how free space is signalled.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .autodiff import Conv, ConvTranspose, Module, Tensor, as_tensor, buffer, functional as F, interp
from .body import BoneTransforms, Box, Skeleton, segment_closest, skeleton_bbox

DEFAULT_RESOLUTION = (32, 32, 16)
FREE_SPACE_EPS = 1e-6


@dataclass(frozen=True)
class GridSpec:
    """Regular grid of voxel centres over ``box`` with ``resolution`` (X, Y, Z) cells."""

    box: Box
    resolution: Tuple[int, int, int] = DEFAULT_RESOLUTION

    @property
    def voxel_size(self) -> np.ndarray:
        return self.box.size / np.asarray(self.resolution, dtype=np.float64)

    def centers(self) -> np.ndarray:
        """Voxel centres as an (X, Y, Z, 3) array."""
        axes = [self.box.lo[a] + (np.arange(n) + 0.5) * self.voxel_size[a] for a, n in enumerate(self.resolution)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_index(self, x):
        """World coordinates to continuous voxel-index coordinates."""
        scale = 1.0 / self.voxel_size
        if isinstance(x, Tensor):
            return F.sub(F.mul(F.sub(x, self.box.lo.astype(x.dtype)), scale.astype(x.dtype)), 0.5)
        return (np.asarray(x) - self.box.lo) * scale - 0.5

    def inside(self, x: np.ndarray) -> np.ndarray:
        return self.box.contains(x)

    @classmethod
    def for_skeleton(cls, skeleton: Skeleton, margin: float = 0.15, resolution=DEFAULT_RESOLUTION) -> "GridSpec":
        return cls(skeleton_bbox(skeleton, None, margin), tuple(int(r) for r in resolution))


# ---------------------------------------------------------------------------
# heuristic initial weights
# ---------------------------------------------------------------------------
def _segment_gaussian(x: np.ndarray, a: np.ndarray, b: np.ndarray, sigma_perp: float) -> np.ndarray:
    axis = b - a
    length = float(np.linalg.norm(axis))
    r, _ = segment_closest(x, a, b)
    if length == 0.0:
        return np.exp(-0.5 * (r / sigma_perp) ** 2)
    half = 0.5 * length
    along = np.clip((x - 0.5 * (a + b)) @ (axis / length), -half, half)
    return np.exp(-0.5 * ((along / half) ** 2 + (r / sigma_perp) ** 2))


def heuristic_channels(skeleton: Skeleton, x: np.ndarray, sigma_perp: float = 0.06) -> np.ndarray:
    """Un-normalised ellipsoidal Gaussian response of every joint channel at points (N, 3).

    A channel owning several segments takes the largest response; the
    along-bone scale is the segment half-length.
    """
    out = np.empty((len(x), skeleton.joint_count))
    for j, segs in enumerate(skeleton.channel_segments()):
        out[:, j] = np.max([_segment_gaussian(x, a, b, sigma_perp) for a, b in segs], axis=0)
    return out


def init_heuristic(skeleton: Skeleton, spec: GridSpec, sigma_perp: float = 0.06, eps: float = 1e-6) -> np.ndarray:
    """Initial weights W0 as a (K, X, Y, Z) probability volume."""
    pts = spec.centers().reshape(-1, 3)
    g = np.maximum(heuristic_channels(skeleton, pts, sigma_perp), eps)
    g = g / g.sum(axis=1, keepdims=True)
    return np.ascontiguousarray(g.T.reshape((skeleton.joint_count,) + tuple(spec.resolution)))


# ---------------------------------------------------------------------------
# learned bias and correction
# ---------------------------------------------------------------------------
class BiasGenerator(Module):
    """Transposed-convolution stack decoding a fixed random latent into a
    (K, X, Y, Z) log-space bias. The last layer starts at zero."""

    def __init__(self, joint_count: int, resolution: Sequence[int], rng: np.random.Generator,
                 latent_channels: int = 16, base: Tuple[int, int, int] = None, latent_seed: int = 1234):
        res = tuple(int(r) for r in resolution)
        n_up = 0
        while all(r % (2 ** (n_up + 1)) == 0 for r in res) and min(r // 2 ** (n_up + 1) for r in res) >= 2 and n_up < 3:
            n_up += 1
        base = base or tuple(r // 2 ** n_up for r in res)
        self.latent = buffer(np.random.default_rng(latent_seed).standard_normal((latent_channels,) + base))
        widths = [latent_channels] + [max(latent_channels // 2, 8)] * (n_up - 1) + [joint_count]
        self.layers = [ConvTranspose(widths[i], widths[i + 1], 2, rng, dims=3, stride=2) for i in range(n_up)]
        if n_up == 0:
            self.layers = [Conv(latent_channels, joint_count, 1, rng, dims=3)]
        self.layers[-1].zero_()
        self.resolution = res

    def __call__(self) -> Tensor:
        x = self.latent
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


def apply_learned_bias(w0: np.ndarray, bias) -> Tensor:
    """log W0 + B."""
    bias = as_tensor(bias)
    if tuple(bias.shape) != tuple(w0.shape):
        raise ValueError(f"bias shape {bias.shape} does not match weight volume shape {w0.shape}")
    return F.add(np.log(w0).astype(bias.dtype), bias)


def combine_correction(biased_log_w0, delta) -> Tensor:
    """Per-voxel softmax over channels of (delta + biased log W0)."""
    biased_log_w0, delta = as_tensor(biased_log_w0), as_tensor(delta)
    if biased_log_w0.shape != delta.shape:
        raise ValueError(f"correction shape {delta.shape} does not match {biased_log_w0.shape}")
    return F.softmax(F.add(delta, biased_log_w0), axis=0)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------
def sample_canonical(W, spec: GridSpec, x, channels: Optional[np.ndarray] = None) -> Tensor:
    """Trilinear weights at canonical points (N, 3); zero outside the box.

    Returns (N, K), or (N,) when ``channels`` picks one channel per point.
    """
    W = as_tensor(W)
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    idx = spec.to_index(x if isinstance(x, Tensor) else xd.astype(W.dtype))
    vals = interp(W, idx, channels)
    inside = spec.inside(xd)
    mask = inside if channels is not None else inside[:, None]
    return F.mul(vals, mask.astype(W.dtype))


def mapped_points(x_p: np.ndarray, transforms: BoneTransforms) -> np.ndarray:
    """R_i x + t_i for every joint i: (N, K, 3)."""
    return transforms.apply(np.asarray(x_p, dtype=np.float64))


def posed_weights(W, spec: GridSpec, x_p: np.ndarray, transforms: BoneTransforms):
    """Posed-space weights from the canonical volume.

    Returns (w_p (N, K), free (N,), mapped points (N, K, 3)). Free-space
    points (normaliser below 1e-6) get all-zero weights.
    """
    W = as_tensor(W)
    y = mapped_points(x_p, transforms)
    n, k = y.shape[:2]
    ch = np.tile(np.arange(k), n)
    w = F.reshape(sample_canonical(W, spec, y.reshape(-1, 3), channels=ch), (n, k))
    denom = w.data.sum(axis=1)
    free = denom < FREE_SPACE_EPS
    s = F.where(free[:, None], np.ones((n, 1), dtype=W.dtype), F.sum(w, axis=1, keepdims=True))
    wp = F.mul(F.div(w, s), (~free)[:, None].astype(W.dtype))
    return wp, free, y
