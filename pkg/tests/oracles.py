"""Independent slow reference implementations used by the tests."""

import itertools

import numpy as np

from posefield.autodiff import Tensor
from posefield.body import BoneTransforms, Box
from posefield.camera import Camera, Extrinsics, Intrinsics
from posefield.encoder import FeatureMap
from posefield.motion_weights import GridSpec


def conv3d_loops(x, w, b, stride=1, padding=0):
    """Direct cross-correlation: x (C, D, H, W), w (O, C, k, k, k)."""
    c, *size = x.shape
    o, _, k, _, _ = w.shape
    xp = np.pad(x, [(0, 0)] + [(padding, padding)] * 3)
    out_size = [(s + 2 * padding - k) // stride + 1 for s in size]
    out = np.zeros([o] + out_size)
    for oc in range(o):
        for i, j, l in itertools.product(*map(range, out_size)):
            acc = b[oc]
            for ic, a, bb, cc in itertools.product(range(c), range(k), range(k), range(k)):
                acc += w[oc, ic, a, bb, cc] * xp[ic, i * stride + a, j * stride + bb, l * stride + cc]
            out[oc, i, j, l] = acc
    return out


def planar_rotation(rng):
    """Signed axis permutation that keeps the z axis (up to sign)."""
    while True:
        P = np.zeros((3, 3))
        P[2, 2] = rng.choice([-1.0, 1.0])
        if rng.uniform() < 0.5:
            P[0, 0], P[1, 1] = rng.choice([-1.0, 1.0], size=2)
        else:
            P[0, 1], P[1, 0] = rng.choice([-1.0, 1.0], size=2)
        if np.linalg.det(P) > 0:
            return P


def dyadic_unprojection_setup(rng, joints=3, channels=5):
    """A scene in which every intermediate value of unprojection is a short
    binary fraction, so any evaluation order gives the same float64 bits.

    Voxel centres sit on multiples of 1/8, bones are signed axis permutations
    with in-plane translations on multiples of 1/8, every voxel belongs to one
    bone and the grid is one voxel deep so every posed point has depth 2.
    """
    spec = GridSpec(Box(np.array([-1.0, -1.0, -0.125]), np.array([1.0, 1.0, 0.125])), (8, 8, 1))
    R = np.stack([planar_rotation(rng) for _ in range(joints)])
    t = rng.integers(-12, 13, size=(joints, 3)) / 8.0
    t[:, 2] = 0.0
    owner = rng.integers(0, joints, size=spec.resolution)
    W = np.zeros((joints,) + spec.resolution)
    for k in range(joints):
        W[k][owner == k] = 1.0
    intr = Intrinsics(8.0, 8.0, 7.5, 7.5, 16, 16)
    cam = Camera(intr, Extrinsics(np.eye(3), np.array([0.0, 0.0, 2.0])))
    feats = rng.integers(-16, 17, size=(channels, 16, 16)) / 4.0
    fmap = FeatureMap(Tensor(feats), intr)
    return spec, BoneTransforms(R, t), W, cam, fmap


def unproject_loops(fmap, transforms, camera, W, spec):
    """Per-voxel composition: forward deform, project, bilinear sample."""
    feats = fmap.data.data
    c, h, w = feats.shape
    centres = spec.centers()
    vol = np.zeros((c,) + tuple(spec.resolution))
    valid = np.zeros(spec.resolution, dtype=bool)
    intr, ext = camera.intr, camera.extr
    for idx in itertools.product(*map(range, spec.resolution)):
        x = centres[idx]
        wk = W[(slice(None),) + idx]
        if wk.sum() < 1e-6:
            continue
        x_o = np.zeros(3)
        for k in range(len(wk)):
            if wk[k] != 0:
                x_o = x_o + wk[k] * (transforms.R[k].T @ (x - transforms.t[k]))
        xc = ext.R @ x_o + ext.t
        if xc[2] <= 1e-6:
            continue
        u = intr.fx * xc[0] / xc[2] + intr.cx
        v = intr.fy * xc[1] / xc[2] + intr.cy
        if not (-0.5 <= u <= intr.width - 0.5 and -0.5 <= v <= intr.height - 0.5):
            continue
        valid[idx] = True
        uc, vc = min(max(u, 0.0), w - 1.0), min(max(v, 0.0), h - 1.0)
        u0, v0 = min(int(np.floor(uc)), w - 2), min(int(np.floor(vc)), h - 2)
        fu, fv = uc - u0, vc - v0
        vol[(slice(None),) + idx] = ((1 - fv) * (1 - fu) * feats[:, v0, u0] + (1 - fv) * fu * feats[:, v0, u0 + 1]
                                     + fv * (1 - fu) * feats[:, v0 + 1, u0] + fv * fu * feats[:, v0 + 1, u0 + 1])
    return vol, valid


def slab_opacity(sigma, thickness):
    """Opacity of a homogeneous slab crossed over ``thickness``."""
    return 1.0 - np.exp(-sigma * thickness)
