import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from posefield.body import (
    Pose,
    Skeleton,
    axis_angle_to_quat,
    canonicalizing_transforms,
    forward_kinematics,
    humanoid12,
    nearest_bone,
    quat_to_matrix,
    skeleton_bbox,
    smpl24,
)


def random_pose(k, rng, deg=60.0):
    axes = rng.normal(size=(k, 3))
    q = axis_angle_to_quat(axes, np.deg2rad(deg) * rng.uniform(size=k))
    return Pose(q, rng.normal(size=3) * 0.1)


def rot(axis, deg):
    return quat_to_matrix(axis_angle_to_quat(np.asarray(axis, float), np.deg2rad(deg)))


def test_shipped_skeletons_load():
    assert smpl24().joint_count == 24
    assert humanoid12().joint_count == 12


def test_skeleton_rejects_bad_trees():
    with pytest.raises(ValueError):
        Skeleton(np.zeros((2, 3)) + [[0, 0, 0], [1, 0, 0]], [-1, -1])
    with pytest.raises(ValueError):
        Skeleton(np.array([[0, 0, 0], [0, 0, 0]]), [-1, 0])


def test_skeleton_file_round_trip(tmp_path):
    sk = humanoid12()
    sk.save(tmp_path / "s.skel")
    back = Skeleton.load(tmp_path / "s.skel")
    np.testing.assert_allclose(back.rest_positions, sk.rest_positions, atol=1e-9)
    assert np.array_equal(back.parent, sk.parent)


def test_identity_pose_keeps_rest_positions():
    sk = smpl24()
    _, p = forward_kinematics(sk, Pose.identity(24))
    np.testing.assert_allclose(p, sk.rest_positions, atol=1e-12)


def test_root_rotation_about_z():
    sk = Skeleton(np.array([[0.0, 0, 0], [1.0, 0, 0]]), [-1, 0])
    q = np.array([axis_angle_to_quat([0, 0, 1], np.pi / 2), [1, 0, 0, 0]])
    _, p = forward_kinematics(sk, Pose(q))
    np.testing.assert_allclose(p[1], [0, 1, 0], atol=1e-12)


def test_chain_matches_matrix_product_oracle():
    rng = np.random.default_rng(0)
    rest = np.array([[0, 0, 0], [0.3, 0.1, 0], [0.5, 0.5, 0.2]])
    sk = Skeleton(rest, [-1, 0, 1])
    pose = random_pose(3, rng)
    R = quat_to_matrix(pose.local_rotations)

    def homog(Rm, t):
        m = np.eye(4)
        m[:3, :3], m[:3, 3] = Rm, t
        return m

    # world_j = T(root + rest_0) R_0 T(rest_1 - rest_0) R_1 ...
    M0 = homog(R[0], rest[0] + pose.root_translation)
    M1 = M0 @ homog(R[1], rest[1] - rest[0])
    M2 = M1 @ homog(R[2], rest[2] - rest[1])
    _, p = forward_kinematics(sk, pose)
    np.testing.assert_allclose(p, [M0[:3, 3], M1[:3, 3], M2[:3, 3]], atol=1e-6)


def test_canonical_pose_gives_identity_transforms():
    tr = canonicalizing_transforms(smpl24(), Pose.identity(24))
    np.testing.assert_allclose(tr.R, np.broadcast_to(np.eye(3), tr.R.shape), atol=1e-12)
    np.testing.assert_allclose(tr.t, 0, atol=1e-12)


def test_single_bone_transform_is_rigid_inverse():
    rest = np.array([[0.0, 0, 0], [0.2, 0.5, 0], [0.2, 1.0, 0]])
    sk = Skeleton(rest, [-1, 0, 1])
    R = rot([1, 2, 3], 40)
    q = np.array([[1, 0, 0, 0], axis_angle_to_quat(np.array([1, 2, 3.0]), np.deg2rad(40)), [1, 0, 0, 0]])
    tr = canonicalizing_transforms(sk, Pose(q))
    p = rest[1]
    np.testing.assert_allclose(tr.R[1], R.T, atol=1e-12)
    np.testing.assert_allclose(tr.t[1], p - R.T @ p, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_transforms_recover_rest_child_joints(seed):
    sk = humanoid12()
    pose = random_pose(12, np.random.default_rng(seed))
    tr = canonicalizing_transforms(sk, pose)
    _, p = forward_kinematics(sk, pose)
    for par, child in sk.bones:
        back = tr.R[par] @ p[child] + tr.t[par]
        np.testing.assert_allclose(back, sk.rest_positions[child], atol=1e-6)


def test_bbox_examples():
    sk = Skeleton(np.array([[0.0, 0, 0]]), [-1])
    box = skeleton_bbox(sk, margin=0.1)
    np.testing.assert_allclose(box.lo, -0.1)
    np.testing.assert_allclose(box.hi, 0.1)
    sk = humanoid12()
    box = skeleton_bbox(sk, margin=0.0)
    np.testing.assert_allclose(box.lo, sk.rest_positions.min(axis=0))
    np.testing.assert_allclose(box.hi, sk.rest_positions.max(axis=0))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0, 0.3))
def test_bbox_contains_posed_joints(seed, margin):
    sk = humanoid12()
    pose = random_pose(12, np.random.default_rng(seed), 90)
    box = skeleton_bbox(sk, pose, margin)
    _, p = forward_kinematics(sk, pose)
    assert np.all(box.contains(p))


def test_nearest_bone_examples():
    sk = humanoid12()
    a, b = sk.bones[3]
    mid = 0.5 * (sk.rest_positions[a] + sk.rest_positions[b])
    k, d, v = nearest_bone(sk, mid)
    assert k == 3 and d == pytest.approx(0, abs=1e-12)
    # beyond the left wrist along the arm: distance to the endpoint
    k, d, _ = nearest_bone(sk, np.array([0.9, 1.42, 0.0]))
    assert d == pytest.approx(0.16)


def dense_nearest(sk, x, n=10 ** 4):
    s = np.linspace(0, 1, n)
    best = np.full(len(x), np.inf)
    for a, b in sk.bones:
        pts = sk.rest_positions[a] + s[:, None] * (sk.rest_positions[b] - sk.rest_positions[a])
        d = np.sqrt(((x[:, None] - pts[None]) ** 2).sum(-1)).min(axis=1)
        best = np.minimum(best, d)
    return best


def test_nearest_bone_matches_dense_sampling():
    sk = humanoid12()
    x = np.random.default_rng(0).uniform([-0.9, 0, -0.3], [0.9, 1.6, 0.3], size=(200, 3))
    _, d, v = nearest_bone(sk, x)
    assert np.max(np.abs(d - dense_nearest(sk, x))) < 1e-3
    np.testing.assert_allclose(np.linalg.norm(v, axis=1), d, atol=1e-12)


def test_pose_rejects_non_unit_quaternions():
    with pytest.raises(ValueError):
        Pose(np.array([[2.0, 0, 0, 0]]))
