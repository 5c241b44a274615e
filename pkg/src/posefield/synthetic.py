"""Synthetic articulated subjects, an analytic capsule ray caster and dataset generation.

Each subject is a set of capsules hanging off a fixed 12-joint humanoid.
Capsules move rigidly with their parent joint, carry a striped albedo along
the bone and are shaded with a fixed directional light over a black
background.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .body import Pose, Skeleton, axis_angle_to_quat, humanoid12, posed_joints
from .camera import Camera, Extrinsics, Intrinsics, ray_for_pixel
from .io import FrameRecord, SceneManifest, read_image, read_manifest, write_manifest, write_ppm

LIGHT_DIR = np.array([0.4, 0.8, 0.6]) / np.linalg.norm([0.4, 0.8, 0.6])
AMBIENT = 0.3
RADIUS_RANGE = (0.03, 0.08)
TORSO_BONES = {(0, 1), (1, 2), (1, 5), (0, 8), (0, 10)}


@dataclass
class SyntheticBody:
    skeleton: Skeleton
    bones: List[Tuple[int, int]]      # capsule endpoints as joint indices (equal -> sphere)
    radii: np.ndarray                 # (B,)
    albedo: np.ndarray                # (B, 3)
    stripe_freq: np.ndarray           # (B,) cycles per metre along the bone
    stripe_phase: np.ndarray          # (B,)

    def __post_init__(self):
        self.radii = np.asarray(self.radii, dtype=np.float64).reshape(-1)
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(-1, 3)
        self.stripe_freq = np.asarray(self.stripe_freq, dtype=np.float64).reshape(-1)
        self.stripe_phase = np.asarray(self.stripe_phase, dtype=np.float64).reshape(-1)
        n = len(self.bones)
        if not (len(self.radii) == len(self.albedo) == len(self.stripe_freq) == len(self.stripe_phase) == n):
            raise ValueError("every capsule needs a radius, albedo and stripe parameters")
        if np.any(self.radii <= 0):
            raise ValueError("capsule radii must be positive")
        if np.any((self.albedo < 0) | (self.albedo > 1)):
            raise ValueError("albedo must lie in [0, 1]")

    def to_header(self) -> Dict[str, str]:
        f = lambda a: ",".join(f"{v:.17g}" for v in np.ravel(a))  # noqa: E731
        return {"body_bones": ",".join(f"{a}-{b}" for a, b in self.bones), "body_radii": f(self.radii),
                "body_albedo": f(self.albedo), "body_stripe_freq": f(self.stripe_freq),
                "body_stripe_phase": f(self.stripe_phase)}

    @classmethod
    def from_header(cls, skeleton: Skeleton, h: Dict[str, str]) -> "SyntheticBody":
        arr = lambda s: np.array([float(v) for v in s.split(",")]) if s else np.zeros(0)  # noqa: E731
        bones = [tuple(int(v) for v in b.split("-")) for b in h["body_bones"].split(",") if b]
        return cls(skeleton, bones, arr(h["body_radii"]), arr(h["body_albedo"]).reshape(-1, 3),
                   arr(h["body_stripe_freq"]), arr(h["body_stripe_phase"]))


def generate_subject(seed: int, skeleton: Optional[Skeleton] = None) -> SyntheticBody:
    """Random radii, albedos and stripes on the fixed humanoid topology."""
    skeleton = skeleton or humanoid12()
    rng = np.random.default_rng([seed, 7])
    bones = skeleton.bones
    lo, hi = RADIUS_RANGE
    radii = np.array([rng.uniform(0.06, hi) if b in TORSO_BONES else rng.uniform(lo, 0.055) for b in bones])
    albedo = rng.uniform(0.25, 0.95, size=(len(bones), 3))
    freq = rng.uniform(1.5, 4.0, size=len(bones))
    phase = rng.uniform(0.0, 2 * np.pi, size=len(bones))
    return SyntheticBody(skeleton, list(bones), radii, albedo, freq, phase)


# ---------------------------------------------------------------------------
# ray casting
# ---------------------------------------------------------------------------
def _sphere_hit(o, d, c, r):
    oc = o - c
    b = np.einsum("ij,ij->i", oc, d)
    cc = np.einsum("ij,ij->i", oc, oc) - r * r
    h = b * b - cc
    t = -b - np.sqrt(np.maximum(h, 0.0))
    return np.where((h >= 0) & (t > 1e-9), t, np.inf)


def ray_capsule(o: np.ndarray, d: np.ndarray, a: np.ndarray, b: np.ndarray, r: float) -> np.ndarray:
    """Distance to the first hit of unit rays (N, 3) with capsule ab of radius r; inf on a miss."""
    t = np.minimum(_sphere_hit(o, d, a, r), _sphere_hit(o, d, b, r))
    ba = b - a
    baba = float(ba @ ba)
    if baba == 0.0:
        return t
    oa = o - a
    bard = d @ ba
    baoa = oa @ ba
    rdoa = np.einsum("ij,ij->i", d, oa)
    oaoa = np.einsum("ij,ij->i", oa, oa)
    qa = baba - bard * bard
    qb = baba * rdoa - baoa * bard
    qc = baba * oaoa - baoa * baoa - r * r * baba
    h = qb * qb - qa * qc
    with np.errstate(divide="ignore", invalid="ignore"):
        tc = (-qb - np.sqrt(np.maximum(h, 0.0))) / qa
    y = baoa + tc * bard
    ok = (qa > 1e-12) & (h >= 0) & (tc > 1e-9) & (y > 0) & (y < baba)
    return np.minimum(t, np.where(ok, tc, np.inf))


def resized(intr: Intrinsics, width: int, height: int) -> Intrinsics:
    sx, sy = width / intr.width, height / intr.height
    return Intrinsics(intr.fx * sx, intr.fy * sy, (intr.cx + 0.5) * sx - 0.5, (intr.cy + 0.5) * sy - 0.5,
                      width, height)


def oracle_render(body: SyntheticBody, pose: Pose, camera: Camera,
                  resolution: Optional[Tuple[int, int]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Ground-truth (H, W, 3) image in [0, 1] and foreground mask, one ray per pixel centre."""
    intr = camera.intr if resolution is None else resized(camera.intr, *resolution)
    w, h = intr.width, intr.height
    vv, uu = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    o, d = ray_for_pixel(uu.reshape(-1), vv.reshape(-1), intr, camera.extr)
    n = len(d)
    image = np.zeros((n, 3))
    if not body.bones:
        return image.reshape(h, w, 3), np.zeros((h, w), dtype=bool)
    joints = posed_joints(body.skeleton, pose)
    hits = np.stack([ray_capsule(o, d, joints[a], joints[b], r) for (a, b), r in zip(body.bones, body.radii)], 1)
    best = np.argmin(hits, axis=1)
    t = hits[np.arange(n), best]
    mask = np.isfinite(t)
    idx = np.flatnonzero(mask)
    if idx.size:
        k = best[idx]
        p = o[idx] + t[idx, None] * d[idx]
        a = joints[[body.bones[i][0] for i in k]]
        b = joints[[body.bones[i][1] for i in k]]
        ba = b - a
        baba = np.einsum("ij,ij->i", ba, ba)
        s = np.clip(np.einsum("ij,ij->i", p - a, ba) / np.where(baba > 0, baba, 1.0), 0.0, 1.0)
        normal = p - (a + s[:, None] * ba)
        normal /= np.maximum(np.linalg.norm(normal, axis=1, keepdims=True), 1e-12)
        along = s * np.sqrt(baba)
        stripe = 0.75 + 0.25 * np.sin(2 * np.pi * body.stripe_freq[k] * along + body.stripe_phase[k])
        shade = AMBIENT + (1.0 - AMBIENT) * np.maximum(0.0, normal @ LIGHT_DIR)
        image[idx] = body.albedo[k] * (stripe * shade)[:, None]
    return np.clip(image, 0.0, 1.0).reshape(h, w, 3), mask.reshape(h, w)


# ---------------------------------------------------------------------------
# motion, cameras and frame selection
# ---------------------------------------------------------------------------
HUMANOID_AMPLITUDE = np.array([0.35, 0.25, 0.7, 0.9, 0.0, 0.7, 0.9, 0.0, 0.5, 0.0, 0.5, 0.0])


def sample_motion(skeleton: Skeleton, n_frames: int, seed: int, scale: float = 1.0) -> List[Pose]:
    """Smooth per-joint rotation-vector trajectories (sums of sinusoids)."""
    rng = np.random.default_rng([seed, 11])
    k = skeleton.joint_count
    amp = HUMANOID_AMPLITUDE if k == len(HUMANOID_AMPLITUDE) else np.full(k, 0.4)
    amp = amp * scale
    comp_amp = rng.uniform(0.3, 1.0, size=(k, 3)) * amp[:, None]
    if k == len(HUMANOID_AMPLITUDE):
        comp_amp[0, [0, 2]] *= 0.2  # root mostly turns about the vertical axis
    freq = rng.uniform(0.5, 1.5, size=(k, 3))
    phase = rng.uniform(0, 2 * np.pi, size=(k, 3))
    sway = rng.uniform(0.0, 0.05, size=3) * np.array([1.0, 0.3, 1.0])
    sway_phase = rng.uniform(0, 2 * np.pi, size=3)
    poses = []
    for f in range(n_frames):
        s = f / max(n_frames, 1)
        rv = comp_amp * np.sin(2 * np.pi * freq * s + phase)
        ang = np.linalg.norm(rv, axis=1)
        axis = np.where(ang[:, None] > 1e-12, rv / np.maximum(ang[:, None], 1e-12), np.array([1.0, 0, 0]))
        q = axis_angle_to_quat(axis, ang)
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        root = sway * np.sin(2 * np.pi * s + sway_phase)
        poses.append(Pose(q, root))
    return poses


def ring_cameras(n: int, width: int = 64, height: int = 64, radius: float = 2.6, elevation: float = 0.8,
                 target=(0.0, 0.78, 0.0), span: float = 2.2, start: float = 0.0) -> List[Camera]:
    """``n`` cameras evenly spaced on a horizontal circle looking at ``target``;
    the focal length frames a ``span``-metre square at the target."""
    focal = min(width, height) * radius / span
    intr = Intrinsics.centered(focal, width, height)
    cams = []
    for i in range(n):
        ang = start + 2 * np.pi * i / n
        eye = np.array([radius * np.sin(ang), elevation, radius * np.cos(ang)])
        cams.append(Camera(intr, Extrinsics.look_at(eye, target)))
    return cams


def observed_frame_indices(n_frames: int, n_observed: int) -> List[int]:
    """0, T/4, 3T/8, T/8 (floored), truncated to ``n_observed``."""
    if not 1 <= n_observed <= 4:
        raise ValueError("between 1 and 4 observed frames are supported")
    t = n_frames
    return [0, t // 4, (3 * t) // 8, t // 8][:n_observed]


def target_frame_indices(n_frames: int) -> List[int]:
    """Second half of the sequence."""
    return list(range((n_frames + 1) // 2, n_frames))


# ---------------------------------------------------------------------------
# dataset on disk
# ---------------------------------------------------------------------------
def build_dataset(out_dir, n_subjects: int, frames_per_subject: int, cameras: Sequence[Camera],
                  n_test: int = 0, seed: int = 0, skeleton: Optional[Skeleton] = None) -> List[Path]:
    """Render every frame of every subject from every camera and write one
    manifest per subject. The last ``n_test`` subjects form the test split."""
    skeleton = skeleton or humanoid12()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {out}: {e}") from e
    paths = []
    for s in range(n_subjects):
        name = f"subject_{s:03d}"
        sdir = out / name
        (sdir / "images").mkdir(parents=True, exist_ok=True)
        skeleton.save(sdir / "skeleton.skel")
        body = generate_subject(seed * 1000 + s, skeleton)
        poses = sample_motion(skeleton, frames_per_subject, seed * 1000 + s)
        frames = []
        for t, pose in enumerate(poses):
            for c, cam in enumerate(cameras):
                img, _ = oracle_render(body, pose, cam)
                rel = f"images/f{t:03d}_c{c:02d}.ppm"
                write_ppm(sdir / rel, img)
                frames.append(FrameRecord(t, c, rel, pose))
        header = {"subject": name, "split": "test" if s >= n_subjects - n_test else "train",
                  "frames": str(frames_per_subject), "seed": str(seed * 1000 + s)}
        header.update(body.to_header())
        m = SceneManifest("skeleton.skel", dict(enumerate(cameras)), frames, header)
        write_manifest(sdir / "manifest.txt", m)
        paths.append(sdir / "manifest.txt")
    return paths


@dataclass
class Subject:
    """A loaded subject sequence with images cached on first use."""

    manifest: SceneManifest
    skeleton: Skeleton
    _cache: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.manifest.header.get("subject", "")

    @property
    def split(self) -> str:
        return self.manifest.header.get("split", "train")

    @property
    def n_frames(self) -> int:
        return self.manifest.frame_count

    @property
    def cameras(self) -> Dict[int, Camera]:
        return self.manifest.cameras

    def pose(self, index: int) -> Pose:
        return self.manifest.frames[[f.index for f in self.manifest.frames].index(index)].pose

    def image(self, index: int, camera: int) -> np.ndarray:
        key = (index, camera)
        if key not in self._cache:
            self._cache[key] = read_image(self.manifest.path(self.manifest.frame(index, camera).image))
        return self._cache[key]

    def body(self) -> SyntheticBody:
        return SyntheticBody.from_header(self.skeleton, self.manifest.header)


def load_subject(manifest_path) -> Subject:
    m = read_manifest(manifest_path)
    return Subject(m, Skeleton.load(m.path(m.skeleton)))


def find_manifests(root) -> List[Path]:
    root = Path(root)
    if root.is_file():
        return [root]
    return sorted(root.glob("*/manifest.txt"))
