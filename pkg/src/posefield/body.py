"""Skeletons, poses, forward kinematics and per-joint canonicalising transforms.

Rotations are unit quaternions (w, x, y, z) at the interface and 3x3
matrices inside. Joint ``j`` owns the rigid motion of the segments that run
from ``j`` to its children, so its transform is also the transform of
motion-weight channel ``j``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------
def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return m.reshape(q.shape[:-1] + (3, 3))


def axis_angle_to_quat(axis: np.ndarray, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=np.float64)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def rotation_angle(R: np.ndarray) -> np.ndarray:
    """Geodesic angle (radians) of rotation matrices."""
    tr = np.trace(R, axis1=-2, axis2=-1)
    return np.arccos(np.clip((tr - 1) / 2, -1.0, 1.0))


# ---------------------------------------------------------------------------
# skeleton and pose
# ---------------------------------------------------------------------------
@dataclass
class Skeleton:
    rest_positions: np.ndarray
    parent: np.ndarray
    names: Optional[List[str]] = None

    def __post_init__(self):
        self.rest_positions = np.asarray(self.rest_positions, dtype=np.float64).reshape(-1, 3)
        self.parent = np.asarray(self.parent, dtype=np.int64)
        k = len(self.parent)
        if self.rest_positions.shape[0] != k:
            raise ValueError("rest_positions and parent disagree on joint count")
        if k == 0 or self.parent[0] != -1 or np.any(self.parent[1:] < 0):
            raise ValueError("joint 0 must be the only root")
        if np.any(self.parent[1:] >= k):
            raise ValueError("parent index out of range")
        # reject cycles: every joint must reach the root
        for j in range(k):
            seen, cur = 0, j
            while cur != 0:
                cur = self.parent[cur]
                seen += 1
                if seen > k:
                    raise ValueError("parent indices do not form a tree")
        for a, b in self.bones:
            if np.allclose(self.rest_positions[a], self.rest_positions[b]):
                raise ValueError(f"bone ({a}, {b}) has coincident endpoints")

    @property
    def joint_count(self) -> int:
        return len(self.parent)

    @property
    def bones(self) -> List[Tuple[int, int]]:
        return [(int(self.parent[j]), j) for j in range(1, self.joint_count)]

    def children(self, j: int) -> List[int]:
        return [int(c) for c in np.nonzero(self.parent == j)[0]]

    def order(self) -> List[int]:
        """Joint indices with every parent before its children."""
        out, todo = [0], [0]
        while todo:
            j = todo.pop(0)
            for c in self.children(j):
                out.append(c)
                todo.append(c)
        return out

    def channel_segments(self) -> List[List[Tuple[np.ndarray, np.ndarray]]]:
        """For each joint, the rest-pose segments its transform moves.

        A joint with children owns one segment per child; a leaf owns a
        zero-length segment at its own position.
        """
        segs = []
        for j in range(self.joint_count):
            p = self.rest_positions[j]
            kids = self.children(j)
            segs.append([(p, self.rest_positions[c]) for c in kids] or [(p, p)])
        return segs

    # -- file format: "index parent x y z" per line ------------------------
    @classmethod
    def load(cls, path) -> "Skeleton":
        rows = []
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                rows.append(line.split())
        rows.sort(key=lambda r: int(r[0]))
        if [int(r[0]) for r in rows] != list(range(len(rows))):
            raise ValueError(f"{path}: joint indices must be 0..K-1")
        parent = [int(r[1]) for r in rows]
        rest = [[float(v) for v in r[2:5]] for r in rows]
        return cls(np.array(rest), np.array(parent))

    def save(self, path) -> None:
        lines = ["# index parent x y z"]
        for j in range(self.joint_count):
            x, y, z = self.rest_positions[j]
            lines.append(f"{j} {int(self.parent[j])} {x:.9g} {y:.9g} {z:.9g}")
        Path(path).write_text("\n".join(lines) + "\n")


def smpl24() -> Skeleton:
    """The shipped 24-joint SMPL-like skeleton."""
    ref = resources.files("posefield") / "data" / "smpl24.skel"
    with resources.as_file(ref) as p:
        return Skeleton.load(p)


HUMANOID12_NAMES = [
    "pelvis", "chest", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder",
    "r_elbow", "r_wrist", "l_hip", "l_ankle", "r_hip", "r_ankle",
]


def humanoid12() -> Skeleton:
    """Reduced 12-joint humanoid used by the synthetic data generator."""
    rest = np.array([
        [0.00, 1.00, 0.0],
        [0.00, 1.45, 0.0],
        [0.20, 1.42, 0.0],
        [0.48, 1.42, 0.0],
        [0.74, 1.42, 0.0],
        [-0.20, 1.42, 0.0],
        [-0.48, 1.42, 0.0],
        [-0.74, 1.42, 0.0],
        [0.10, 0.93, 0.0],
        [0.10, 0.10, 0.0],
        [-0.10, 0.93, 0.0],
        [-0.10, 0.10, 0.0],
    ])
    parent = np.array([-1, 0, 1, 2, 3, 1, 5, 6, 0, 8, 0, 10])
    return Skeleton(rest, parent, list(HUMANOID12_NAMES))


@dataclass
class Pose:
    local_rotations: np.ndarray
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.local_rotations = np.asarray(self.local_rotations, dtype=np.float64).reshape(-1, 4)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64).reshape(3)
        norms = np.linalg.norm(self.local_rotations, axis=1)
        if np.any(np.abs(norms - 1) > 1e-6):
            raise ValueError(f"quaternions must have unit norm, got norms {norms}")

    @classmethod
    def identity(cls, joint_count: int) -> "Pose":
        q = np.zeros((joint_count, 4))
        q[:, 0] = 1
        return cls(q, np.zeros(3))

    def copy(self) -> "Pose":
        return Pose(self.local_rotations.copy(), self.root_translation.copy())


@dataclass
class BoneTransforms:
    """Per-joint rigid maps from observation space to canonical space:
    ``x_canonical = R[i] @ x + t[i]``."""

    R: np.ndarray
    t: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Map points (N, 3) through every transform: returns (N, K, 3)."""
        return np.einsum("kab,nb->nka", self.R, x) + self.t[None]

    def inverse_apply(self, x: np.ndarray) -> np.ndarray:
        """R_i^-1 (x - t_i) for every i: returns (N, K, 3)."""
        return np.einsum("kba,nkb->nka", self.R, x[:, None, :] - self.t[None])


def forward_kinematics(skeleton: Skeleton, pose: Pose) -> Tuple[np.ndarray, np.ndarray]:
    """World rotations (K, 3, 3) and world positions (K, 3) of every joint."""
    k = skeleton.joint_count
    if pose.local_rotations.shape[0] != k:
        raise ValueError(f"pose has {pose.local_rotations.shape[0]} rotations for {k} joints")
    local = quat_to_matrix(pose.local_rotations)
    G = np.zeros((k, 3, 3))
    p = np.zeros((k, 3))
    rest = skeleton.rest_positions
    for j in skeleton.order():
        par = skeleton.parent[j]
        if par < 0:
            G[j] = local[j]
            p[j] = rest[j] + pose.root_translation
        else:
            G[j] = G[par] @ local[j]
            p[j] = p[par] + G[par] @ (rest[j] - rest[par])
    return G, p


def canonicalizing_transforms(skeleton: Skeleton, pose: Pose) -> BoneTransforms:
    """(canonical joint transform) o (posed joint transform)^-1 for every joint."""
    G, p = forward_kinematics(skeleton, pose)
    R = np.transpose(G, (0, 2, 1))
    t = skeleton.rest_positions - np.einsum("kab,kb->ka", R, p)
    return BoneTransforms(R, t)


def posed_joints(skeleton: Skeleton, pose: Pose) -> np.ndarray:
    return forward_kinematics(skeleton, pose)[1]


# ---------------------------------------------------------------------------
# boxes and distances
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    @property
    def size(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1)


def skeleton_bbox(skeleton: Skeleton, pose: Optional[Pose] = None, margin: float = 0.15) -> Box:
    if margin < 0:
        raise ValueError("margin must be non-negative")
    pose = pose or Pose.identity(skeleton.joint_count)
    pts = posed_joints(skeleton, pose)
    return Box(pts.min(axis=0) - margin, pts.max(axis=0) + margin)


def segment_closest(x: np.ndarray, a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Distance from points (N, 3) to segment ab and the closest points."""
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        closest = np.broadcast_to(a, x.shape)
    else:
        s = np.clip((x - a) @ ab / denom, 0.0, 1.0)
        closest = a + s[:, None] * ab
    return np.linalg.norm(x - closest, axis=1), closest


def nearest_bone(skeleton: Skeleton, x: np.ndarray):
    """Closest bone segment to each point.

    Returns (bone index, distance, vector from x to the closest point); ties
    go to the lowest bone index. A single point gives scalars.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = x.reshape(-1, 3)
    rest = skeleton.rest_positions
    dists, vecs = [], []
    for a, b in skeleton.bones:
        d, c = segment_closest(pts, rest[a], rest[b])
        dists.append(d)
        vecs.append(c - pts)
    dists = np.stack(dists, axis=1)
    k = np.argmin(dists, axis=1)
    rows = np.arange(len(pts))
    vec = np.stack(vecs, axis=1)[rows, k]
    d = dists[rows, k]
    if single:
        return int(k[0]), float(d[0]), vec[0]
    return k, d, vec


def nearest_joint_vector(skeleton: Skeleton, x: np.ndarray) -> np.ndarray:
    """Vector from each point (N, 3) to its nearest rest joint (ties: lowest index)."""
    diff = skeleton.rest_positions[None] - np.asarray(x)[:, None]
    k = np.argmin(np.linalg.norm(diff, axis=2), axis=1)
    return diff[np.arange(len(x)), k]


def channel_distances(skeleton: Skeleton, x: np.ndarray) -> np.ndarray:
    """Distance from points (N, 3) to each joint's owned segments: (N, K)."""
    out = np.empty((len(x), skeleton.joint_count))
    for j, segs in enumerate(skeleton.channel_segments()):
        out[:, j] = np.min([segment_closest(x, a, b)[0] for a, b in segs], axis=0)
    return out
