import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from posefield.autodiff import functional as F, param_grad_check, precision
from posefield.body import Pose, Skeleton, axis_angle_to_quat, canonicalizing_transforms, humanoid12
from posefield.motion_weights import (
    BiasGenerator,
    GridSpec,
    apply_learned_bias,
    combine_correction,
    heuristic_channels,
    init_heuristic,
    posed_weights,
    sample_canonical,
)

SK = humanoid12()
SPEC = GridSpec.for_skeleton(SK, 0.15, (8, 10, 4))
W0 = init_heuristic(SK, SPEC)


def random_pose(rng, deg=45.0):
    q = axis_angle_to_quat(rng.normal(size=(12, 3)), np.deg2rad(deg) * rng.uniform(size=12))
    return Pose(q, rng.normal(size=3) * 0.05)


def test_grid_centres_and_index_mapping():
    c = SPEC.centers()
    assert c.shape == (8, 10, 4, 3)
    idx = SPEC.to_index(c.reshape(-1, 3))
    grid = np.stack(np.meshgrid(np.arange(8), np.arange(10), np.arange(4), indexing="ij"), -1).reshape(-1, 3)
    np.testing.assert_allclose(idx, grid, atol=1e-9)


def test_voxel_sums_are_one():
    np.testing.assert_allclose(W0.sum(axis=0), 1.0, atol=1e-6)
    assert W0.shape == (12, 8, 10, 4)


def test_bone_midpoint_argmax_is_owner():
    for a, b in SK.bones:
        mid = 0.5 * (SK.rest_positions[a] + SK.rest_positions[b])
        g = heuristic_channels(SK, mid[None])[0]
        assert np.argmax(g) == a


def test_mirror_bones_get_equal_weight_on_symmetry_plane():
    pts = np.array([[0.0, 1.2, 0.0], [0.0, 0.5, 0.05], [0.0, 1.44, -0.02]])
    g = heuristic_channels(SK, pts)
    for left, right in [(2, 5), (3, 6), (8, 10), (9, 11)]:
        np.testing.assert_allclose(g[:, left], g[:, right], rtol=1e-12, atol=1e-300)


def test_zero_bias_generator_leaves_log_w0():
    gen = BiasGenerator(12, SPEC.resolution, np.random.default_rng(0))
    b = gen()
    assert b.shape == W0.shape
    np.testing.assert_allclose(apply_learned_bias(W0, b).data, np.log(W0).astype(np.float32), atol=1e-6)


def test_constant_bias_shift_does_not_change_weights():
    rng = np.random.default_rng(1)
    with precision(np.float64):
        b = rng.normal(size=W0.shape)
        p1 = F.softmax(apply_learned_bias(W0, b), axis=0).data
        p2 = F.softmax(apply_learned_bias(W0, b + 3.7), axis=0).data
    np.testing.assert_allclose(p1, p2, atol=1e-12)


def test_bias_shape_mismatch_raises():
    with pytest.raises(ValueError):
        apply_learned_bias(W0, np.zeros((12, 2, 2, 2)))
    with pytest.raises(ValueError):
        combine_correction(np.zeros(W0.shape), np.zeros((1,) + W0.shape[1:]))


def test_bias_generator_receives_gradients():
    with precision(np.float64):
        gen = BiasGenerator(12, SPEC.resolution, np.random.default_rng(2))
        rng = np.random.default_rng(3)
        for layer in gen.layers:  # move off the zero init so every layer sees signal
            layer.weight.data = rng.normal(size=layer.weight.shape) * 0.3
        probe = rng.normal(size=W0.shape)
        x = SPEC.centers().reshape(-1, 3)[::7] + 0.013

        def loss():
            W = F.softmax(apply_learned_bias(W0, gen()), axis=0)
            return F.sum(F.mul(sample_canonical(W, SPEC, x), probe.reshape(12, -1).T[: len(x)]))
        err = param_grad_check(loss, gen.parameters(), max_coords=6, rng=rng)
    assert err < 1e-4


def test_correction_limits():
    biased = np.log(W0)
    with precision(np.float64):
        W = combine_correction(biased, np.zeros_like(biased)).data
        np.testing.assert_allclose(W, W0 / W0.sum(axis=0), atol=1e-12)
        d = np.zeros_like(biased)
        d[4] = 50.0
        W = combine_correction(biased, d).data
    assert np.all(W[4] > 1 - 1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_random_correction_stays_on_simplex(seed):
    d = np.random.default_rng(seed).normal(size=W0.shape) * 3
    with precision(np.float64):
        W = combine_correction(np.log(W0), d).data
    np.testing.assert_allclose(W.sum(axis=0), 1.0, atol=1e-6)


def test_sample_at_centre_and_outside():
    c = SPEC.centers()
    with precision(np.float64):
        got = sample_canonical(W0, SPEC, c[3, 4, 1][None]).data[0]
        out = sample_canonical(W0, SPEC, np.array([[5.0, 0, 0], [0, -1.0, 0]])).data
    np.testing.assert_allclose(got, W0[:, 3, 4, 1], atol=1e-12)
    assert np.all(out == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_interior_samples_stay_on_simplex(seed):
    x = np.random.default_rng(seed).uniform(SPEC.box.lo, SPEC.box.hi, size=(20, 3))
    with precision(np.float64):
        w = sample_canonical(W0, SPEC, x).data
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)


def test_posed_weights_at_canonical_pose_equal_canonical_weights():
    tr = canonicalizing_transforms(SK, Pose.identity(12))
    x = np.random.default_rng(0).uniform(SPEC.box.lo, SPEC.box.hi, size=(30, 3))
    with precision(np.float64):
        wp, free, _ = posed_weights(W0, SPEC, x, tr)
        wc = sample_canonical(W0, SPEC, x).data
    assert not free.any()
    np.testing.assert_allclose(wp.data, wc, atol=1e-12)


def test_single_bone_posed_weight_is_one():
    sk = Skeleton(np.array([[0.0, 0, 0], [0, 1.0, 0]]), [-1, 0])
    spec = GridSpec.for_skeleton(sk, 0.2, (4, 6, 4))
    W = np.ones((2, 4, 6, 4))
    W[1] = 0.0  # the leaf channel carries nothing
    q = np.array([axis_angle_to_quat(np.array([0, 0, 1.0]), 0.3), [1, 0, 0, 0]])
    tr = canonicalizing_transforms(sk, Pose(q))
    x = np.array([[0.02, 0.3, 0.0], [-0.05, 0.4, 0.05]])  # canonical images stay in the box
    with precision(np.float64):
        wp, free, _ = posed_weights(W, spec, x, tr)
    assert not free.any()
    np.testing.assert_allclose(wp.data, [[1, 0], [1, 0]], atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_posed_weights_normalised_or_free(seed):
    rng = np.random.default_rng(seed)
    tr = canonicalizing_transforms(SK, random_pose(rng))
    x = rng.uniform(SPEC.box.lo - 0.2, SPEC.box.hi + 0.2, size=(50, 3))
    with precision(np.float64):
        wp, free, _ = posed_weights(W0, SPEC, x, tr)
    s = wp.data.sum(axis=1)
    np.testing.assert_allclose(s[~free], 1.0, atol=1e-5)
    assert np.all(s[free] == 0)


def test_points_far_outside_are_free():
    tr = canonicalizing_transforms(SK, Pose.identity(12))
    _, free, _ = posed_weights(W0, SPEC, np.array([[10.0, 10, 10]]), tr)
    assert free[0]
