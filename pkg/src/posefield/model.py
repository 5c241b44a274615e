"""Full pipeline: observations -> canonical representation -> rendered pixels."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Module, Tensor, as_tensor, functional as F, no_grad
from .body import BoneTransforms, Pose, Skeleton, canonicalizing_transforms, nearest_bone, nearest_joint_vector, skeleton_bbox
from .camera import Camera, RaySamples, ray_for_pixel, sample_rays_in_box
from .deformation import backward_deform, forward_deform
from .encoder import (
    FEATURE_CHANNELS,
    FeatureCNN,
    FeatureMap,
    TriplaneDecoder,
    VolumeEncoder,
    bottleneck_shape,
    corrected_weights,
    sample_triplane,
    sample_volume,
)
from .fusion import FeatureFusion, QueryContext, extract_pixel_features, to_canonical_dirs
from .motion_weights import BiasGenerator, GridSpec, apply_learned_bias, init_heuristic, sample_canonical
from .renderer import RadianceMLP, composite, decode


@dataclass
class ModelConfig:
    grid: Tuple[int, int, int] = (32, 32, 16)
    unet_widths: Tuple[int, int, int] = (32, 64, 128)
    unet_heads: int = 4
    cnn_width: int = 16
    cnn_downsample: int = 1  # feature map at 1/cnn_downsample of the input
    latent_dim: int = 512
    triplane_res: int = 32
    fusion_dim: int = 64
    fusion_hidden: int = 128
    fusion_heads: int = 4
    nerf_width: int = 256
    nerf_depth: int = 8
    nerf_skip: int = 4
    nerf_freqs: int = 6
    density_scale: float = 1.0
    n_samples: int = 128
    bbox_margin: float = 0.15
    skip_distance: Optional[float] = None
    sigma_perp: float = 0.06
    bg_color: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    use_correction: bool = True
    seed: int = 0

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Reduced sizes that train at interactive speed on one CPU core."""
        base = dict(grid=(16, 16, 8), unet_widths=(16, 32, 64), cnn_width=8, latent_dim=64, triplane_res=16,
                    nerf_width=64, density_scale=10.0, n_samples=32, skip_distance=0.15)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass
class Observation:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    camera: Camera
    pose: Pose


@dataclass
class EncodedScene:
    """Everything derived from the observed views that the per-query path needs."""

    fmaps: List[FeatureMap]
    cameras: List[Camera]
    transforms: List[BoneTransforms]
    W: Tensor
    V: Tensor
    planes: Tensor
    z: Tensor
    delta: Optional[Tensor]
    view_valid: np.ndarray


@dataclass
class RenderOutput:
    color: Tensor            # (R, 3)
    opacity: Tensor          # (R,)
    samples: RaySamples
    free: np.ndarray         # (R * M,) free-space flags of the samples
    points: np.ndarray       # (R * M, 3) posed sample positions
    canonical: Optional[Tensor] = None   # canonical positions of the non-free samples
    cycle: Optional[Tensor] = None       # their squared cycle residuals


class PoseFieldModel(Module):
    """Holds all learnable parts; attribute names are the checkpoint tensor prefixes."""

    def __init__(self, skeleton: Skeleton, config: Optional[ModelConfig] = None):
        cfg = config or ModelConfig()
        rng = np.random.default_rng(cfg.seed)
        k = skeleton.joint_count
        self._skeleton = skeleton
        self._config = cfg
        self._spec = GridSpec.for_skeleton(skeleton, cfg.bbox_margin, cfg.grid)
        self._w0 = init_heuristic(skeleton, self._spec, cfg.sigma_perp)
        self.cnn2d = FeatureCNN(rng, cfg.cnn_width, FEATURE_CHANNELS, cfg.cnn_downsample)
        self.volumorph_v = VolumeEncoder(cfg.unet_widths, FEATURE_CHANNELS, rng, cfg.unet_heads,
                                         latent_dim=cfg.latent_dim, bottleneck_shape=bottleneck_shape(cfg.grid))
        self.volumorph_dw = VolumeEncoder(cfg.unet_widths, k, rng, cfg.unet_heads, zero_head=True)
        self.triplane_dec = TriplaneDecoder(cfg.latent_dim, cfg.triplane_res, rng)
        self.motion_weights = BiasGenerator(k, cfg.grid, rng)
        self.fusion = FeatureFusion(k, rng, cfg.fusion_dim, cfg.fusion_hidden, cfg.fusion_heads)
        self.nerf = RadianceMLP(cfg.fusion_dim, rng, cfg.nerf_width, cfg.nerf_depth, cfg.nerf_skip,
                                cfg.density_scale, cfg.nerf_freqs)

    # -- accessors -----------------------------------------------------------
    @property
    def skeleton(self) -> Skeleton:
        return self._skeleton

    @property
    def config(self) -> ModelConfig:
        return self._config

    @property
    def spec(self) -> GridSpec:
        return self._spec

    @property
    def w0(self) -> np.ndarray:
        return self._w0

    def motion_parameters(self) -> List[Tensor]:
        """Parameters of the weight-correction encoder."""
        return self.volumorph_dw.parameters()

    def main_parameters(self) -> List[Tensor]:
        motion = {id(p) for p in self.motion_parameters()}
        return [p for p in self.parameters() if id(p) not in motion]

    # -- encoding --------------------------------------------------------------
    def encode(self, observations: Sequence[Observation], use_correction: Optional[bool] = None) -> EncodedScene:
        if len(observations) == 0:
            raise ValueError("at least one observed view is required")
        use_dw = self._config.use_correction if use_correction is None else use_correction
        fmaps = [self.cnn2d(o.image, o.camera.intr) for o in observations]
        cams = [o.camera for o in observations]
        trs = [canonicalizing_transforms(self._skeleton, o.pose) for o in observations]
        biased = apply_learned_bias(self._w0, self.motion_weights())
        delta = None
        if use_dw:
            initial = F.softmax(biased, axis=0)
            delta, _, _ = self.volumorph_dw(fmaps, trs, cams, initial, self._spec)
        W = corrected_weights(biased, delta)
        V, bottlenecks, masks = self.volumorph_v(fmaps, trs, cams, W, self._spec)
        valid = masks.reshape(len(observations), -1).any(axis=1)
        z = self.volumorph_v.latent(bottlenecks, valid)
        planes = self.triplane_dec(z)
        return EncodedScene(fmaps, cams, trs, W, V, planes, z, delta, valid)

    # -- per-query evaluation --------------------------------------------------
    def query(self, enc: EncodedScene, x_c: Tensor, view_dirs_posed: np.ndarray, w_p: np.ndarray,
              target: BoneTransforms) -> Tuple[Tensor, Tensor]:
        """Density and colour at canonical points (all assumed non-free)."""
        spec = self._spec
        xd = x_c.data.astype(np.float64)
        f_vox = sample_volume(enc.V, spec, x_c)
        f_glob = sample_triplane(enc.planes, spec.box, x_c)
        wc = sample_canonical(enc.W.data, spec, xd).data.astype(np.float64)
        f_pix, avail, odirs = [], [], []
        for fm, tr, cam in zip(enc.fmaps, enc.transforms, enc.cameras):
            f, a, x_o = extract_pixel_features(fm, x_c, tr, cam, enc.W, spec)
            f_pix.append(f)
            avail.append(a)
            odirs.append(to_canonical_dirs(x_o - cam.extr.center, wc, tr))
        ctx = QueryContext(xd, to_canonical_dirs(view_dirs_posed, w_p, target),
                           nearest_joint_vector(self._skeleton, xd), wc, odirs, np.stack(avail, axis=1))
        feats = self.fusion(f_glob, f_vox, f_pix, ctx.available, ctx.encoded(spec.box), odirs)
        lo = spec.box.lo.astype(x_c.dtype)
        scale = (2.0 / spec.box.size).astype(x_c.dtype)
        x_norm = F.sub(F.mul(F.sub(x_c, lo), scale), 1.0)
        return self.nerf(x_norm, feats)

    def render_rays(self, enc: EncodedScene, pose: Pose, origins: np.ndarray, dirs: np.ndarray,
                    rng: Optional[np.random.Generator] = None, n_samples: Optional[int] = None,
                    cycle: bool = False) -> RenderOutput:
        cfg = self._config
        m = n_samples or cfg.n_samples
        box = skeleton_bbox(self._skeleton, pose, cfg.bbox_margin)
        s = sample_rays_in_box(origins, dirs, box, m, rng)
        r = len(s.hit)
        pts = s.points.reshape(-1, 3)
        target = canonicalizing_transforms(self._skeleton, pose)
        live_rays = np.repeat(s.hit, m)
        dt = enc.W.dtype
        x_c, free, w_p = backward_deform(pts[live_rays], target, enc.W, self._spec)
        if cfg.skip_distance is not None and len(free):
            # empty-space skipping: canonical points far from every bone carry no density
            free = free | (nearest_bone(self._skeleton, x_c.data.astype(np.float64))[1] > cfg.skip_distance)
        free_all = np.ones(r * m, dtype=bool)
        free_all[np.flatnonzero(live_rays)] = free
        live = np.flatnonzero(~free_all)
        res = None
        if live.size:
            pick = np.flatnonzero(~free)
            xq = F.take(x_c, pick)
            vd = np.repeat(np.asarray(dirs, dtype=np.float64).reshape(-1, 3), m, axis=0)[live]
            sig, rgb = self.query(enc, xq, vd, w_p.data[pick].astype(np.float64), target)
            sigma = F.reshape(F.scatter(sig, live, r * m), (r, m))
            color = F.reshape(F.scatter(rgb, live, r * m), (r, m, 3))
            if cycle:
                back = forward_deform(xq, target, enc.W, self._spec)
                res = F.sum(F.square(F.sub(back, pts[live].astype(back.dtype))), axis=1)
        else:
            xq = None
            sigma = as_tensor(np.zeros((r, m), dtype=dt))
            color = as_tensor(np.zeros((r, m, 3), dtype=dt))
        c, opacity, _ = composite(sigma, color, s.deltas, cfg.bg_color)
        return RenderOutput(c, opacity, s, free_all, pts, xq, res)

    def render_patch(self, enc: EncodedScene, pose: Pose, camera: Camera, rect: Tuple[int, int, int, int],
                     rng: Optional[np.random.Generator] = None, cycle: bool = False) -> RenderOutput:
        """Render pixels [x0, x0 + w) x [y0, y0 + h); ``rect`` = (x0, y0, w, h)."""
        x0, y0, w, h = rect
        vv, uu = np.meshgrid(np.arange(y0, y0 + h), np.arange(x0, x0 + w), indexing="ij")
        o, d = ray_for_pixel(uu.reshape(-1).astype(float), vv.reshape(-1).astype(float), camera.intr, camera.extr)
        return self.render_rays(enc, pose, o, d, rng, cycle=cycle)

    def render_image(self, enc: EncodedScene, pose: Pose, camera: Camera, tile: Optional[int] = None) -> np.ndarray:
        """Whole image (H, W, 3) without gradients, optionally in square tiles."""
        W_, H_ = camera.intr.width, camera.intr.height
        out = np.zeros((H_, W_, 3))
        step = tile or max(W_, H_)
        with no_grad():
            for y0 in range(0, H_, step):
                for x0 in range(0, W_, step):
                    w, h = min(step, W_ - x0), min(step, H_ - y0)
                    res = self.render_patch(enc, pose, camera, (x0, y0, w, h))
                    out[y0:y0 + h, x0:x0 + w] = res.color.data.reshape(h, w, 3)
        return out
