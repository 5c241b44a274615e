"""Observation encoder: 2D features, unprojection into the canonical grid,
cross-view volume aggregation, global latent and triplane decoding.

Every per-view computation runs view by view with identical array shapes,
and view reductions use order-independent sums, so the outputs are exactly
invariant to the order of the observed views.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import (
    Conv,
    ConvTranspose,
    GroupNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Tensor,
    as_tensor,
    functional as F,
    interp,
    max_pool_mask,
    parameter,
    upsample_nearest,
)
from .body import Box
from .camera import Camera, Intrinsics, project
from .deformation import forward_deform
from .motion_weights import GridSpec, combine_correction

FEATURE_CHANNELS = 32
IMAGE_CHANNELS = 3
MIN_IMAGE_SIDE = 32


@dataclass
class FeatureMap:
    """Per-view 2D features (C, h, w) at quarter resolution with matching intrinsics."""

    data: Tensor
    intr: Intrinsics

    @property
    def channels(self) -> int:
        return self.data.shape[0]


def _avg_pool(image: np.ndarray, f: int) -> np.ndarray:
    c, h, w = image.shape
    return image.reshape(c, h // f, f, w // f, f).mean(axis=(2, 4))


class FeatureCNN(Module):
    """Encoder-decoder CNN: stride-2 stem convolutions down to 1/``downsample``
    resolution, then three down and three up levels with skip connections."""

    def __init__(self, rng: np.random.Generator, width: int = 16, out_channels: int = FEATURE_CHANNELS,
                 downsample: int = 1):
        if downsample not in (1, 2, 4):
            raise ValueError(f"downsample must be 1, 2 or 4, got {downsample}")
        self.downsample = downsample
        w = [width * 2 ** i for i in range(4)]
        self.stem1 = Conv(IMAGE_CHANNELS, w[0], 3, rng, dims=2, stride=2 if downsample >= 2 else 1)
        self.stem2 = Conv(w[0], w[0], 3, rng, dims=2, stride=2 if downsample == 4 else 1)
        self.down = [Conv(w[i], w[i + 1], 3, rng, dims=2, stride=2) for i in range(3)]
        self.up = [Conv(w[i + 1] + w[i], w[i], 3, rng, dims=2) for i in reversed(range(3))]
        self.head = Conv(w[0], out_channels, 1, rng, dims=2)

    def __call__(self, image: np.ndarray, intr: Intrinsics) -> FeatureMap:
        """``image`` is (H, W, 3) in [0, 1]; both sides must be multiples of the downsampling factor."""
        img = np.asarray(image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"expected an (H, W, 3) image, got {img.shape}")
        h, w = img.shape[:2]
        if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
            raise ValueError(f"image {w}x{h} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}")
        if h % self.downsample or w % self.downsample:
            raise ValueError(f"image sides must be multiples of {self.downsample}, got {w}x{h}")
        chw = np.ascontiguousarray(img.transpose(2, 0, 1))
        x = F.relu(self.stem1(chw.astype(self.stem1.weight.dtype)))
        x = F.relu(self.stem2(x))
        skips = []
        for layer in self.down:
            skips.append(x)
            x = F.relu(layer(x))
        for layer, skip in zip(self.up, reversed(skips)):
            x = upsample_nearest(x, skip.shape[1:])
            x = F.relu(layer(F.concat([x, skip], axis=0)))
        learned = self.head(x)
        small = _avg_pool(chw, self.downsample).astype(learned.dtype)
        return FeatureMap(F.concat([learned, small], axis=0), intr.scaled(self.downsample))


def sample_featuremap(fmap: FeatureMap, uv) -> Tensor:
    """Bilinear sample at pixel coordinates (N, 2) of the feature map's own resolution."""
    uv = as_tensor(uv)
    rows_cols = F.stack([uv[:, 1], uv[:, 0]], axis=1)
    return interp(fmap.data, rows_cols)


def unproject_undeform(fmap: FeatureMap, transforms, camera: Camera, W, spec: GridSpec):
    """Lift one view's features into the canonical grid.

    Each voxel centre is moved into the view's posed space with the forward
    deformation defined by ``W`` (used as a constant), projected and
    bilinearly sampled. Returns (volume (C, X, Y, Z), validity (X, Y, Z)).
    """
    Wd = W.data if isinstance(W, Tensor) else np.asarray(W)
    pts = spec.centers().reshape(-1, 3)
    x_o, free = forward_deform(pts, transforms, Wd.astype(np.float64), spec, return_free=True)
    uv, _, ok = project(x_o.data, fmap.intr, camera.extr)
    valid = ok & ~free
    feats = sample_featuremap(fmap, uv.astype(fmap.data.dtype))
    feats = F.mul(feats, valid[:, None].astype(feats.dtype))
    vol = F.reshape(F.transpose(feats, (1, 0)), (fmap.channels,) + tuple(spec.resolution))
    return vol, valid.reshape(spec.resolution)


def _norm(gn: GroupNorm, x: Tensor) -> Tensor:
    return F.reshape(gn(F.reshape(x, (1,) + x.shape)), x.shape)


def cross_view_mean(att: MultiHeadAttention, feats: Sequence[Tensor], mask: np.ndarray) -> Tensor:
    """Per voxel: attend over the valid views, add the residual and average
    over valid views. Voxels with no valid view give zero."""
    c = feats[0].shape[0]
    spatial = feats[0].shape[1:]
    n = int(np.prod(spatial))
    tokens = [F.transpose(F.reshape(f, (c, n)), (1, 0)) for f in feats]
    m = np.asarray(mask, dtype=bool).reshape(len(feats), n).T
    outs = att(tokens, tokens, m)
    dt = tokens[0].dtype
    kept = [F.mul(F.add(t, o), m[:, i:i + 1].astype(dt)) for i, (t, o) in enumerate(zip(tokens, outs))]
    total = F.sum_symmetric(F.stack(kept, axis=0), axis=0)
    count = np.maximum(m.sum(axis=1, keepdims=True), 1).astype(dt)
    mean = F.div(total, count)
    return F.reshape(F.transpose(mean, (1, 0)), (c,) + spatial)


class VolumeAggregator(Module):
    """Shared-weight 3D U-Net over per-view volumes with cross-view attention
    at both encoder levels and the bottleneck."""

    def __init__(self, in_channels: int, widths: Sequence[int], out_channels: int,
                 rng: np.random.Generator, heads: int = 4, zero_head: bool = False):
        w0, w1, w2 = widths
        self.enc0 = Conv(in_channels, w0, 3, rng)
        self.gn0 = GroupNorm(w0)
        self.enc1 = Conv(w0, w1, 3, rng, stride=2)
        self.gn1 = GroupNorm(w1)
        self.enc2 = Conv(w1, w2, 3, rng, stride=2)
        self.gn2 = GroupNorm(w2)
        self.att = [MultiHeadAttention(w, heads, rng) for w in (w0, w1, w2)]
        self.dec1 = Conv(w2 + w1, w1, 3, rng)
        self.gnd1 = GroupNorm(w1)
        self.dec0 = Conv(w1 + w0, w0, 3, rng)
        self.gnd0 = GroupNorm(w0)
        self.head = Conv(w0, out_channels, 1, rng)
        if zero_head:
            self.head.zero_()

    def __call__(self, volumes: Sequence[Tensor], masks: np.ndarray) -> Tuple[Tensor, List[Tensor]]:
        """Returns (aggregated volume, per-view bottleneck volumes)."""
        if len(volumes) == 0:
            raise ValueError("aggregation needs at least one view")
        shape = volumes[0].shape
        if any(v.shape != shape for v in volumes):
            raise ValueError("all per-view volumes must share one grid shape")
        m0 = np.asarray(masks, dtype=bool)
        x0 = [F.relu(_norm(self.gn0, self.enc0(v))) for v in volumes]
        x1 = [F.relu(_norm(self.gn1, self.enc1(v))) for v in x0]
        x2 = [F.relu(_norm(self.gn2, self.enc2(v))) for v in x1]
        m1 = max_pool_mask(m0, 2)
        m2 = max_pool_mask(m1, 2)
        a0 = cross_view_mean(self.att[0], x0, m0)
        a1 = cross_view_mean(self.att[1], x1, m1)
        a2 = cross_view_mean(self.att[2], x2, m2)
        y = upsample_nearest(a2, a1.shape[1:])
        y = F.relu(_norm(self.gnd1, self.dec1(F.concat([y, a1], axis=0))))
        y = upsample_nearest(y, a0.shape[1:])
        y = F.relu(_norm(self.gnd0, self.dec0(F.concat([y, a0], axis=0))))
        return self.head(y), x2


class GlobalLatent(Module):
    """One learned query attending over the flattened bottleneck volumes."""

    def __init__(self, in_dim: int, dim: int, rng: np.random.Generator, heads: int = 4):
        self.query = parameter(rng.standard_normal((1, dim)))
        self.att = MultiHeadAttention(dim, heads, rng, q_dim=dim, kv_dim=in_dim, out_proj=False)
        self.dim = dim

    def __call__(self, bottlenecks: Sequence[Tensor], valid: Optional[np.ndarray] = None) -> Tensor:
        tokens = [F.reshape(b, (1, -1)) for b in bottlenecks]
        mask = None if valid is None else np.asarray(valid, dtype=bool)[None]
        return F.reshape(self.att([self.query], tokens, mask)[0], (self.dim,))


class VolumeEncoder(Module):
    """One unproject-and-aggregate encoder instance; optionally with the
    global latent branch."""

    def __init__(self, widths, out_channels: int, rng: np.random.Generator, heads: int = 4,
                 latent_dim: Optional[int] = None, bottleneck_shape=None, zero_head: bool = False):
        self.unet = VolumeAggregator(FEATURE_CHANNELS + IMAGE_CHANNELS, widths, out_channels, rng, heads, zero_head)
        if latent_dim is not None:
            self.latent = GlobalLatent(int(np.prod(bottleneck_shape)) * widths[2], latent_dim, rng, heads)

    def __call__(self, fmaps: Sequence[FeatureMap], transforms, cameras, W, spec: GridSpec):
        vols, masks = [], []
        for fm, tr, cam in zip(fmaps, transforms, cameras):
            v, m = unproject_undeform(fm, tr, cam, W, spec)
            vols.append(v)
            masks.append(m)
        masks = np.stack(masks)
        out, bottlenecks = self.unet(vols, masks)
        return out, bottlenecks, masks


def bottleneck_shape(resolution: Sequence[int]) -> Tuple[int, ...]:
    """Grid extents after two stride-2 convolutions (ceil division)."""
    return tuple(math.ceil(math.ceil(int(r) / 2) / 2) for r in resolution)


class TriplaneDecoder(Module):
    """Latent vector to three (C, r, r) feature planes: a linear layer to a
    coarse grid followed by two stride-2 transposed convolutions."""

    def __init__(self, latent_dim: int, resolution: int, rng: np.random.Generator,
                 channels: int = FEATURE_CHANNELS, hidden: int = 32):
        if resolution % 4:
            raise ValueError("triplane resolution must be a multiple of 4")
        self.base = resolution // 4
        self.hidden = hidden
        self.fc = Linear(latent_dim, 3 * hidden * self.base ** 2, rng)
        self.up1 = ConvTranspose(hidden, hidden, 2, rng, dims=2, stride=2)
        self.up2 = ConvTranspose(hidden, channels, 2, rng, dims=2, stride=2)

    def __call__(self, z: Tensor) -> Tensor:
        h = F.relu(self.fc(F.reshape(z, (1, -1))))
        h = F.reshape(h, (3, self.hidden, self.base, self.base))
        h = F.relu(self.up1(h))
        return self.up2(h)


PLANE_AXES = ((0, 1), (0, 2), (1, 2))  # XY, XZ, YZ


def sample_triplane(planes, box: Box, x) -> Tensor:
    """Mean of the three bilinear plane samples at points (N, 3); zero outside ``box``.

    Planes are (3, C, r, r) with texel centres at the centres of r equal
    cells across the box (align-corners off).
    """
    planes = as_tensor(planes)
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    r = planes.shape[2:]
    if r[0] != r[1]:
        raise ValueError("triplane planes must be square")
    scale = (float(r[0]) / box.size).astype(planes.dtype)
    if isinstance(x, Tensor):
        idx = F.sub(F.mul(F.sub(x, box.lo.astype(x.dtype)), scale), 0.5)
    else:
        idx = ((xd - box.lo) * scale - 0.5).astype(planes.dtype)
    samples = [interp(planes[p], F.stack([idx[:, a], idx[:, b]], axis=1) if isinstance(idx, Tensor)
                      else idx[:, [a, b]]) for p, (a, b) in enumerate(PLANE_AXES)]
    mean = F.mul(F.add(F.add(samples[0], samples[1]), samples[2]), 1.0 / 3.0)
    return F.mul(mean, box.contains(xd)[:, None].astype(planes.dtype))


def sample_volume(V, spec: GridSpec, x) -> Tensor:
    """Trilinear feature sample at canonical points (N, 3); zero outside the grid box."""
    V = as_tensor(V)
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    idx = spec.to_index(x if isinstance(x, Tensor) else xd.astype(V.dtype))
    return F.mul(interp(V, idx), spec.inside(xd)[:, None].astype(V.dtype))


def predict_weight_correction(encoder: VolumeEncoder, fmaps, transforms, cameras, initial_W,
                              spec: GridSpec) -> Tensor:
    """Log-space correction (K, X, Y, Z) from the observations, unprojected
    with the initial weights."""
    delta, _, _ = encoder(fmaps, transforms, cameras, initial_W, spec)
    return delta


def corrected_weights(biased_log_w0: Tensor, delta: Optional[Tensor]) -> Tensor:
    if delta is None:
        return F.softmax(biased_log_w0, axis=0)
    return combine_correction(biased_log_w0, delta)
