"""Pinhole cameras, projection, pixel rays and stratified ray-box sampling.

Pixel coordinates put the centre of pixel (column i, row j) at (u, v) =
(i, j); the image covers [-0.5, width - 0.5] x [-0.5, height - 0.5].
Camera axes: +x right, +y down, +z forward.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .autodiff import Tensor, functional as F
from .body import Box


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (-0.5 <= self.cx <= self.width - 0.5 and -0.5 <= self.cy <= self.height - 0.5):
            raise ValueError("principal point must lie inside the image")

    def scaled(self, factor: int) -> "Intrinsics":
        """Intrinsics of an image downsampled by an integer ``factor``
        (each low-res pixel averages a factor x factor block)."""
        off = (factor - 1) / 2.0
        return Intrinsics(self.fx / factor, self.fy / factor, (self.cx - off) / factor,
                          (self.cy - off) / factor, self.width // factor, self.height // factor)

    @classmethod
    def centered(cls, focal: float, width: int, height: int) -> "Intrinsics":
        return cls(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


@dataclass(frozen=True)
class Extrinsics:
    """World-to-camera map ``x_cam = R @ x_world + t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-5 or abs(np.linalg.det(R) - 1) > 1e-5:
            raise ValueError("camera rotation must be orthogonal with determinant 1")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0)) -> "Extrinsics":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(R, -R @ eye)


@dataclass(frozen=True)
class Camera:
    intr: Intrinsics
    extr: Extrinsics


def project(x: np.ndarray, intr: Intrinsics, extr: Extrinsics):
    """Project world points (N, 3) or (3,).

    Returns (uv, depth, in_frustum). Points at depth <= 1e-6 or outside the
    image bounds are flagged out of frustum.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = x.reshape(-1, 3)
    xc = pts @ extr.R.T + extr.t
    z = xc[:, 2]
    safe = np.where(np.abs(z) > 1e-12, z, 1e-12)
    u = intr.fx * xc[:, 0] / safe + intr.cx
    v = intr.fy * xc[:, 1] / safe + intr.cy
    ok = (z > 1e-6) & (u >= -0.5) & (u <= intr.width - 0.5) & (v >= -0.5) & (v <= intr.height - 0.5)
    uv = np.stack([u, v], axis=1)
    if single:
        return uv[0], float(z[0]), bool(ok[0])
    return uv, z, ok


def project_tensor(x: Tensor, intr: Intrinsics, extr: Extrinsics) -> Tuple[Tensor, np.ndarray]:
    """Differentiable projection of (N, 3) points; returns ((N, 2) uv, in_frustum)."""
    xc = F.add(F.matmul(x, extr.R.T.astype(x.dtype)), extr.t.astype(x.dtype))
    z = xc.data[:, 2]
    front = z > 1e-6
    zs = F.where(front, xc[:, 2], np.ones_like(z))
    u = F.add(F.mul(F.div(xc[:, 0], zs), intr.fx), intr.cx)
    v = F.add(F.mul(F.div(xc[:, 1], zs), intr.fy), intr.cy)
    uv = F.stack([u, v], axis=1)
    ud, vd = uv.data[:, 0], uv.data[:, 1]
    ok = front & (ud >= -0.5) & (ud <= intr.width - 0.5) & (vd >= -0.5) & (vd <= intr.height - 0.5)
    return uv, ok


def ray_for_pixel(u, v, intr: Intrinsics, extr: Extrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Origin and unit direction of the ray(s) through pixel coordinates (u, v)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)
    d = d_cam @ extr.R
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    origin = np.broadcast_to(extr.center, d.shape).copy()
    return origin, d


def ray_box_interval(origins: np.ndarray, dirs: np.ndarray, box: Box):
    """Slab-method intersection; returns (t_near, t_far, hit) with t_near >= 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (box.lo - origins) * inv
        t2 = (box.hi - origins) * inv
    # a zero direction component leaves that slab unconstrained (or empty)
    par = dirs == 0
    inside = (origins >= box.lo) & (origins <= box.hi)
    lo_t = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    hi_t = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = np.maximum(lo_t.max(axis=-1), 0.0)
    t_far = hi_t.min(axis=-1)
    hit = t_far > t_near
    return t_near, t_far, hit


@dataclass
class RaySamples:
    t: np.ndarray        # (N, M) distances along each ray
    points: np.ndarray   # (N, M, 3)
    deltas: np.ndarray   # (N, M) segment lengths used for compositing
    hit: np.ndarray      # (N,) whether the ray meets the box


def sample_rays_in_box(origins: np.ndarray, dirs: np.ndarray, box: Box, n_samples: int,
                       rng: Optional[np.random.Generator] = None) -> RaySamples:
    """Stratified samples inside ``box``: one draw per equal sub-interval
    (midpoints when ``rng`` is None). Missed rays get zero-length deltas.

    ``deltas[i]`` is the distance to the next sample; the last sample gets one
    sub-interval width so the deltas of a ray sum to the chord length up to
    jitter.
    """
    if n_samples < 2:
        raise ValueError("need at least 2 samples per ray")
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    t_near, t_far, hit = ray_box_interval(origins, dirs, box)
    length = np.where(hit, t_far - t_near, 0.0)
    step = length / n_samples
    frac = np.full((len(origins), n_samples), 0.5) if rng is None else rng.uniform(size=(len(origins), n_samples))
    t = t_near[:, None] + (np.arange(n_samples)[None] + frac) * step[:, None]
    t = np.where(hit[:, None], t, 0.0)
    norms = np.linalg.norm(dirs, axis=1)
    deltas = np.empty_like(t)
    deltas[:, :-1] = np.diff(t, axis=1) * norms[:, None]
    deltas[:, -1] = step * norms
    deltas = np.where(hit[:, None], deltas, 0.0)
    points = origins[:, None] + t[..., None] * dirs[:, None]
    return RaySamples(t, points, deltas, hit)


def sample_ray_in_box(ray: Tuple[np.ndarray, np.ndarray], box: Box, n_samples: int,
                      jitter_seed: Optional[int] = None):
    """Single-ray form: returns (points (M, 3), deltas (M,)); empty arrays on a miss."""
    rng = None if jitter_seed is None else np.random.default_rng(jitter_seed)
    s = sample_rays_in_box(ray[0], ray[1], box, n_samples, rng)
    if not s.hit[0]:
        return np.zeros((0, 3)), np.zeros(0)
    return s.points[0], s.deltas[0]
