"""Losses, optimisation schedule, pose-noise curriculum and metrics."""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, TextIO

import numpy as np

from .autodiff import Adam, Tensor, as_tensor, backward, clip_grad_norm, functional as F
from .body import Pose, Skeleton, axis_angle_to_quat, channel_distances, quat_multiply
from .camera import Camera
from .deformation import cycle_residual
from .model import Observation, PoseFieldModel
from .motion_weights import GridSpec

PSNR_CAP = 99.0


@dataclass
class TrainConfig:
    iters: int = 10000
    lr_main: float = 2e-4
    lr_motion: float = 2e-5
    motion_delay_iters: int = 5000
    grad_clip: float = 7.5
    lr_decay: float = 1.0  # learning-rate factor reached at the last iteration (exponential)
    patches: int = 6
    patch_size: int = 32
    views: int = 2
    lambda_mse: float = 0.3
    lambda_consis: float = 2.0
    lambda_near: float = 0.1
    eta: float = 0.05
    perceptual_proxy: bool = False
    noise_schedule: bool = True
    noise_max_p: float = 0.75
    noise_deg: float = 5.0
    foreground_bias: float = 0.8
    seed: int = 0

    def __post_init__(self):
        for name in ("iters", "lr_main", "lr_motion", "grad_clip", "patches", "patch_size", "views"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")
        if not 0.0 <= self.noise_max_p <= 0.75:
            raise ValueError("noise_max_p must lie in [0, 0.75]")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Short schedule for ModelConfig.desk(): one small patch per step, a
        larger decaying lr, the correction switched on after a third of training."""
        base = dict(patches=1, patch_size=16, lr_main=1e-3, lr_motion=1e-3, lr_decay=0.1)
        base.update(overrides)
        base.setdefault("motion_delay_iters", base.get("iters", cls.iters) // 3)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossBreakdown:
    l_mse: float
    l_consis: float
    l_near: float
    l_proxy: float
    total: float
    grad_norm: float = 0.0
    wall: float = 0.0


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------
def loss_mse(pred, gt) -> Tensor:
    """Mean over pixels of the squared RGB error norm."""
    pred = as_tensor(pred)
    gt = np.asarray(gt)
    if tuple(pred.shape) != tuple(gt.shape):
        raise ValueError(f"prediction shape {pred.shape} does not match target shape {gt.shape}")
    if pred.shape[-1] != 3:
        raise ValueError("colours must have 3 channels in the last axis")
    diff = F.sub(pred, gt.astype(pred.dtype))
    n_pix = int(np.prod(pred.shape[:-1]))
    return F.mul(F.sum(F.square(diff)), 1.0 / max(n_pix, 1))


def thresholded_mean(d, eta: float = 0.05) -> Tensor:
    """Mean of d where d >= eta, zero elsewhere."""
    d = as_tensor(d)
    if d.size == 0:
        return as_tensor(np.zeros((), dtype=d.dtype))
    keep = (d.data >= eta).astype(d.dtype)
    return F.mean(F.mul(d, keep))


def loss_consistency(points: np.ndarray, transforms, W, spec: GridSpec, eta: float = 0.05) -> Tensor:
    """Thresholded cycle residual averaged over the rendering query points."""
    return thresholded_mean(cycle_residual(points, transforms, W, spec), eta)


def bone_distance_volume(skeleton: Skeleton, spec: GridSpec) -> np.ndarray:
    """(K, X, Y, Z) distance from each voxel centre to each joint's bones."""
    d = channel_distances(skeleton, spec.centers().reshape(-1, 3))
    return np.ascontiguousarray(d.T.reshape((skeleton.joint_count,) + tuple(spec.resolution)))


def loss_near(W, distances: np.ndarray) -> Tensor:
    """Sum over voxels and channels of weight times bone distance, per voxel."""
    W = as_tensor(W)
    n_vox = int(np.prod(W.shape[1:]))
    return F.mul(F.sum(F.mul(W, distances.astype(W.dtype))), 1.0 / n_vox)


def _pool2(x: Tensor) -> Tensor:
    g, h, w, c = x.shape
    x = F.reshape(x[:, : h // 2 * 2, : w // 2 * 2], (g, h // 2, 2, w // 2, 2, c))
    return F.mean(x, axis=(2, 4))


def gradient_proxy_loss(pred, gt, scales: int = 3) -> Tensor:
    """Multi-scale L1 difference of image gradients of (G, H, W, 3) patches."""
    p = as_tensor(pred)
    g = as_tensor(np.asarray(gt, dtype=p.dtype))
    total = None
    for s in range(scales):
        if min(p.shape[1:3]) < 2:
            break
        for axis in (1, 2):
            n = p.shape[axis]
            sl_a = [slice(None)] * 4
            sl_b = [slice(None)] * 4
            sl_a[axis] = slice(1, n)
            sl_b[axis] = slice(0, n - 1)
            dp = F.sub(p[tuple(sl_a)], p[tuple(sl_b)])
            dg = F.sub(g[tuple(sl_a)], g[tuple(sl_b)])
            diff = F.sub(dp, dg)
            term = F.mean(F.sqrt(F.add(F.square(diff), 1e-8)))
            total = term if total is None else F.add(total, term)
        if s < scales - 1:
            p, g = _pool2(p), _pool2(g)
    return total if total is not None else as_tensor(np.zeros((), dtype=p.dtype))


# ---------------------------------------------------------------------------
# metrics and noise
# ---------------------------------------------------------------------------
def psnr(render: np.ndarray, gt: np.ndarray) -> float:
    """10 log10(1 / MSE) over all pixels and channels, capped at 99 dB."""
    render, gt = np.asarray(render, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if render.shape != gt.shape:
        raise ValueError(f"shape mismatch {render.shape} vs {gt.shape}")
    mse = float(np.mean((render - gt) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def perturb_pose(pose: Pose, magnitude_deg: float, seed, root_sigma: float = 0.01) -> Pose:
    """Compose every local rotation with a random-axis rotation whose angle
    is N(0, magnitude) and jitter the root translation. Magnitude 0 returns
    an unchanged copy."""
    if magnitude_deg < 0:
        raise ValueError("noise magnitude must be non-negative")
    if magnitude_deg == 0:
        return pose.copy()
    rng = np.random.default_rng(seed)
    k = pose.local_rotations.shape[0]
    axes = rng.standard_normal((k, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    angles = rng.normal(0.0, np.deg2rad(magnitude_deg), size=k)
    noise = axis_angle_to_quat(axes, angles)
    q = quat_multiply(noise, pose.local_rotations)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    root = pose.root_translation + rng.normal(0.0, root_sigma, size=3)
    return Pose(q, root)


def noise_probability(it: int, total: int, p_max: float = 0.75) -> float:
    """Linear ramp from 0 to ``p_max`` over the first half of training, then flat."""
    half = max(total * 0.5, 1.0)
    return float(min(p_max, p_max * it / half))


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------
@dataclass
class Batch:
    target_image: np.ndarray  # (H, W, 3)
    target_camera: Camera
    target_pose: Pose
    observations: List[Observation]
    target_mask: Optional[np.ndarray] = None


def choose_patches(batch: Batch, n: int, size: int, rng: np.random.Generator, fg_bias: float = 0.8):
    """Patch rectangles (x0, y0, w, h); most are centred on foreground pixels."""
    h, w = batch.target_image.shape[:2]
    size_w, size_h = min(size, w), min(size, h)
    mask = batch.target_mask if batch.target_mask is not None else batch.target_image.max(axis=2) > 0
    fg = np.argwhere(mask)
    rects = []
    for _ in range(n):
        if len(fg) and rng.uniform() < fg_bias:
            cy, cx = fg[rng.integers(len(fg))]
        else:
            cy, cx = rng.integers(h), rng.integers(w)
        x0 = int(np.clip(cx - size_w // 2, 0, w - size_w))
        y0 = int(np.clip(cy - size_h // 2, 0, h - size_h))
        rects.append((x0, y0, size_w, size_h))
    return rects


class Trainer:
    """Owns the optimiser state and the step counter for one model."""

    def __init__(self, model: PoseFieldModel, config: TrainConfig, log: Optional[TextIO] = None):
        self.model = model
        self.config = config
        self.iteration = 0
        self.optimizer = Adam({"main": model.main_parameters(), "motion": model.motion_parameters()},
                              {"main": config.lr_main, "motion": config.lr_motion})
        self.distances = bone_distance_volume(model.skeleton, model.spec)
        self.log = log

    def active_groups(self, it: int) -> List[str]:
        groups = ["main"]
        if self.model.config.use_correction and it >= self.config.motion_delay_iters:
            groups.append("motion")
        return groups

    def step(self, batch: Batch) -> LossBreakdown:
        breakdown = train_step(self, batch, self.iteration)
        self.iteration += 1
        return breakdown


def _noisy_observations(obs: Sequence[Observation], cfg: TrainConfig, it: int, rng) -> List[Observation]:
    if not cfg.noise_schedule or cfg.noise_deg <= 0:
        return list(obs)
    if rng.uniform() >= noise_probability(it, cfg.iters, cfg.noise_max_p):
        return list(obs)
    return [Observation(o.image, o.camera, perturb_pose(o.pose, cfg.noise_deg, rng.integers(2 ** 63)))
            for o in obs]


def train_step(trainer: Trainer, batch: Batch, it: int) -> LossBreakdown:
    """One optimisation step on G patches of one target frame."""
    t0 = time.perf_counter()
    model, cfg = trainer.model, trainer.config
    rng = np.random.default_rng([cfg.seed, it])
    obs = _noisy_observations(batch.observations, cfg, it, rng)
    enc = model.encode(obs)
    rects = choose_patches(batch, cfg.patches, cfg.patch_size, rng, cfg.foreground_bias)
    colors, gts, cyc = [], [], []
    for x0, y0, w, h in rects:
        out = model.render_patch(enc, batch.target_pose, batch.target_camera, (x0, y0, w, h), rng, cycle=True)
        colors.append(F.reshape(out.color, (h, w, 3)))
        gts.append(batch.target_image[y0:y0 + h, x0:x0 + w])
        if out.cycle is not None:
            cyc.append(out.cycle)
    pred = F.stack(colors, axis=0)
    gt = np.stack(gts)
    l_mse = loss_mse(pred, gt)
    l_cons = thresholded_mean(F.concat(cyc, axis=0), cfg.eta) if cyc else as_tensor(np.zeros((), pred.dtype))
    l_near = loss_near(enc.W, trainer.distances)
    total = F.add(F.add(F.mul(l_mse, cfg.lambda_mse), F.mul(l_cons, cfg.lambda_consis)),
                  F.mul(l_near, cfg.lambda_near))
    l_proxy = 0.0
    if cfg.perceptual_proxy:
        proxy = gradient_proxy_loss(pred, gt)
        total = F.add(total, proxy)
        l_proxy = proxy.item()
    model.zero_grad()
    backward(total)
    groups = trainer.active_groups(it)
    active = [p for g in groups for p in trainer.optimizer.groups[g]]
    norm = clip_grad_norm(active, cfg.grad_clip)
    factor = cfg.lr_decay ** (min(it, cfg.iters) / cfg.iters)
    trainer.optimizer.lrs = {"main": cfg.lr_main * factor, "motion": cfg.lr_motion * factor}
    trainer.optimizer.step(groups)
    model.zero_grad()
    res = LossBreakdown(l_mse.item(), l_cons.item(), l_near.item(), l_proxy, total.item(), norm,
                        time.perf_counter() - t0)
    if trainer.log is not None:
        trainer.log.write(f"iter={it} total={res.total:.6g} mse={res.l_mse:.6g} consis={res.l_consis:.6g} "
                          f"near={res.l_near:.6g} proxy={res.l_proxy:.6g} grad_norm={res.grad_norm:.6g} "
                          f"wall={res.wall:.4f}\n")
        trainer.log.flush()
    return res


def train(trainer: Trainer, sampler: Callable[[np.random.Generator, int], Batch], iters: int,
          callback: Optional[Callable[[int, LossBreakdown], None]] = None) -> List[LossBreakdown]:
    """Run ``iters`` steps drawing batches from ``sampler(rng, it)``."""
    history = []
    for _ in range(iters):
        it = trainer.iteration
        batch = sampler(np.random.default_rng([trainer.config.seed, it, 1]), it)
        res = trainer.step(batch)
        history.append(res)
        if callback is not None:
            callback(it, res)
    return history
