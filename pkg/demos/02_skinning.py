"""Blend skinning on the 12-joint humanoid: heuristic weights, a posed body,
and the round trip posed -> canonical -> posed."""

import numpy as np

from posefield.autodiff import precision
from posefield.body import canonicalizing_transforms, humanoid12, posed_joints
from posefield.deformation import backward_deform, cycle_residual, forward_deform
from posefield.motion_weights import GridSpec, init_heuristic
from posefield.synthetic import sample_motion

sk = humanoid12()
spec = GridSpec.for_skeleton(sk, 0.15, (16, 16, 8))
W0 = init_heuristic(sk, spec)
print("weight volume", W0.shape, "voxel size", spec.voxel_size.round(3))

pose = sample_motion(sk, 16, seed=1)[5]
tr = canonicalizing_transforms(sk, pose)
joints = posed_joints(sk, pose)

# points scattered around the posed bones
rng = np.random.default_rng(0)
pts = joints[1:] + rng.normal(scale=0.03, size=(11, 3))

with precision(np.float64):
    x_c, free, w = backward_deform(pts, tr, W0, spec)
    back = forward_deform(x_c.data, tr, W0, spec).data
    res = cycle_residual(pts, tr, W0, spec).data

print("free-space points", int(free.sum()))
print("dominant bone per point", w.data.argmax(axis=1))
print("cycle error (m)", np.sqrt(res).round(4))
print("largest round-trip error (m)", float(np.abs(back - pts).max()))
