"""Finite-difference gradient checks for every differentiable operation.

Each case builds a random scalar-valued function and an evaluation point.
Points are drawn away from kinks (relu at 0, grid lines, thresholds) so the
central difference is meaningful.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import (
    Conv,
    ConvTranspose,
    GroupNorm,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    Tensor,
    conv,
    conv_transpose,
    functional as F,
    grad_check,
    interp,
    param_grad_check,
    precision,
    upsample_nearest,
)
from .body import Pose, axis_angle_to_quat, canonicalizing_transforms, humanoid12
from .camera import Camera, Extrinsics, Intrinsics, project_tensor
from .deformation import backward_deform, cycle_residual, forward_deform
from .encoder import FeatureMap, sample_featuremap, sample_triplane, sample_volume, unproject_undeform
from .fusion import positional_encode
from .motion_weights import GridSpec, apply_learned_bias, combine_correction, init_heuristic, sample_canonical
from .renderer import RadianceMLP, composite
from .training import gradient_proxy_loss, loss_mse, loss_near, thresholded_mean

TOLERANCE = 1e-4
MAX_COORDS = 200  # probed coordinates per input, drawn at random beyond this


def _away(rng, shape, gap=0.05, scale=1.0):
    """Normal samples with |x| >= gap."""
    x = rng.normal(size=shape) * scale
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap + x, x)


def _frac(rng, n, size, lo=0.15, hi=0.85):
    """Continuous grid coordinates whose fractional parts avoid the grid lines."""
    return rng.integers(0, size - 1, n) + rng.uniform(lo, hi, n)


def _probe(rng, out_shape) -> np.ndarray:
    return rng.normal(size=out_shape)


def _scalar(t: Tensor, w: np.ndarray) -> Tensor:
    # random projection to a scalar keeps every output coordinate in play
    return F.sum(F.mul(t, w.astype(t.dtype)))


Case = Callable[[np.random.Generator], Tuple[Callable[..., Tensor], list]]


def _unary(op, gen=None):
    def build(rng):
        x = gen(rng) if gen else rng.normal(size=(3, 4))
        w = _probe(rng, x.shape)
        return (lambda a: _scalar(op(a), w)), [x]
    return build


def _binary(op, gen_b=None):
    def build(rng):
        a = rng.normal(size=(3, 4))
        b = gen_b(rng) if gen_b else rng.normal(size=(1, 4))
        w = _probe(rng, (3, 4))
        return (lambda x, y: _scalar(op(x, y), w)), [a, b]
    return build


def _matmul(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    w = _probe(rng, (2, 3, 5))
    return (lambda x, y: _scalar(F.matmul(x, y), w)), [a, b]


def _linear(rng):
    x, wt, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5)), rng.normal(size=5)
    w = _probe(rng, (4, 5))
    return (lambda a, m, c: _scalar(F.linear(a, m, c), w)), [x, wt, b]


def _reduce(op, **kw):
    def build(rng):
        x = rng.normal(size=(3, 4, 2))
        probe = op(Tensor(x), **kw).data
        w = _probe(rng, probe.shape)
        return (lambda a: _scalar(op(a, **kw), w)), [x]
    return build


def _softmax(rng):
    x = rng.normal(size=(3, 5))
    mask = rng.uniform(size=(3, 5)) > 0.3
    mask[:, 0] = True
    sym = bool(rng.integers(2))
    w = _probe(rng, x.shape)
    return (lambda a: _scalar(F.softmax(a, axis=1, mask=mask, symmetric=sym), w)), [x]


def _layer_norm(rng):
    x, g, b = rng.normal(size=(4, 6)), rng.normal(size=6), rng.normal(size=6)
    w = _probe(rng, x.shape)
    return (lambda a, c, d: _scalar(F.layer_norm(a, c, d), w)), [x, g, b]


def _group_norm(rng):
    x, g, b = rng.normal(size=(2, 4, 3, 3)), rng.normal(size=4), rng.normal(size=4)
    w = _probe(rng, x.shape)
    return (lambda a, c, d: _scalar(F.group_norm(a, 2, c, d), w)), [x, g, b]


def _shape_ops(rng):
    x = rng.normal(size=(2, 3, 4))
    w1 = _probe(rng, (4, 6))
    w2 = _probe(rng, (4, 3, 2))
    w3 = _probe(rng, (5, 2, 3, 4))

    def fn(a):
        r = _scalar(F.reshape(a, (4, 6)), w1)
        r = F.add(r, _scalar(F.transpose(a, (2, 1, 0)), w2))
        return F.add(r, _scalar(F.broadcast_to(a, (5, 2, 3, 4)), w3))
    return fn, [x]


def _indexing(rng):
    x = rng.normal(size=(5, 3))
    idx = rng.integers(0, 5, 7)
    live = np.sort(rng.choice(9, size=5, replace=False))
    w1, w2, w3, w4 = _probe(rng, (7, 3)), _probe(rng, (9, 3)), _probe(rng, (2, 2)), _probe(rng, (3,))

    def fn(a):
        r = _scalar(F.take(a, idx), w1)
        r = F.add(r, _scalar(F.scatter(a, live, 9), w2))
        r = F.add(r, _scalar(a[1:3, ::2], w3))
        return F.add(r, _scalar(F.index(a, (np.array([0, 2, 4]), 1)), w4))
    return fn, [x]


def _joins(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    w1, w2 = _probe(rng, (4, 3)), _probe(rng, (2, 2, 3))
    return (lambda x, y: F.add(_scalar(F.concat([x, y], axis=0), w1),
                               _scalar(F.stack([x, y], axis=1), w2))), [a, b]


def _where(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    cond = rng.uniform(size=(3, 4)) > 0.5
    w = _probe(rng, (3, 4))
    return (lambda x, y: _scalar(F.where(cond, x, y), w)), [a, b]


def _cumsum(rng):
    x = rng.normal(size=(3, 6))
    excl = bool(rng.integers(2))
    w = _probe(rng, x.shape)
    return (lambda a: _scalar(F.cumsum(a, axis=1, exclusive=excl), w)), [x]


def _conv(nd):
    def build(rng):
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, k))
        spatial = tuple(int(s) for s in rng.integers(k + 1, k + 4, nd))
        x = rng.normal(size=(2, 2) + spatial)
        wt = rng.normal(size=(3, 2) + (k,) * nd)
        b = rng.normal(size=3)
        out = conv(Tensor(x), Tensor(wt), Tensor(b), stride, pad).data
        w = _probe(rng, out.shape)
        return (lambda a, m, c: _scalar(conv(a, m, c, stride, pad), w)), [x, wt, b]
    return build


def _conv_transpose(nd):
    def build(rng):
        k = int(rng.integers(2, 4))
        stride = int(rng.integers(1, 3))
        spatial = tuple(int(s) for s in rng.integers(2, 4, nd))
        x = rng.normal(size=(1, 3) + spatial)
        wt = rng.normal(size=(3, 2) + (k,) * nd)
        b = rng.normal(size=2)
        out = conv_transpose(Tensor(x), Tensor(wt), Tensor(b), stride, 0).data
        w = _probe(rng, out.shape)
        return (lambda a, m, c: _scalar(conv_transpose(a, m, c, stride, 0), w)), [x, wt, b]
    return build


def _upsample(rng):
    x = rng.normal(size=(1, 2, 2, 3, 2))
    size = (4, 5, 3)
    w = _probe(rng, (1, 2) + size)
    return (lambda a: _scalar(upsample_nearest(a, size), w)), [x]


def _interp(nd):
    def build(rng):
        spatial = tuple(int(s) for s in rng.integers(2, 5, nd))
        grid = rng.normal(size=(3,) + spatial)
        coords = np.stack([_frac(rng, 6, s) for s in spatial], axis=1)
        if rng.integers(2):
            ch = rng.integers(0, 3, 6)
            w = _probe(rng, (6,))
        else:
            ch = None
            w = _probe(rng, (6, 3))
        return (lambda g, c: _scalar(interp(g, c, ch), w)), [grid, coords]
    return build


def _norm(rng):
    x = rng.normal(size=(4, 3))
    w = _probe(rng, (4,))
    return (lambda a: _scalar(F.norm(a, axis=1), w)), [x]


def _sum_symmetric(rng):
    x = rng.normal(size=(3, int(rng.integers(2, 10)), 2))
    w = _probe(rng, (3, 2))
    return (lambda a: _scalar(F.sum_symmetric(a, axis=1), w)), [x]


# -- geometry and rendering ---------------------------------------------------
_SKEL = humanoid12()


def _random_pose(rng, deg=25.0) -> Pose:
    k = _SKEL.joint_count
    q = np.stack([axis_angle_to_quat(rng.normal(size=3), np.deg2rad(deg) * rng.uniform()) for _ in range(k)])
    return Pose(q, rng.normal(size=3) * 0.05)


def _grid_setup(rng):
    spec = GridSpec.for_skeleton(_SKEL, 0.15, (4, 5, 3))
    w0 = init_heuristic(_SKEL, spec)
    w0 = w0 * rng.uniform(0.5, 1.5, size=w0.shape)
    return spec, w0 / w0.sum(axis=0, keepdims=True)


def _body_points(rng, n, spec) -> np.ndarray:
    j = _SKEL.rest_positions[rng.integers(0, _SKEL.joint_count, n)]
    return j + rng.normal(size=(n, 3)) * 0.03


def _backward_deform(rng):
    spec, W = _grid_setup(rng)
    tr = canonicalizing_transforms(_SKEL, _random_pose(rng))
    x_c = _body_points(rng, 6, spec)
    x_p = forward_deform(x_c, tr, W, spec).data
    _, free, _ = backward_deform(x_p, tr, W, spec)
    x_p = x_p[~free]
    w = _probe(rng, (len(x_p), 3))
    return (lambda m: _scalar(backward_deform(x_p, tr, m, spec)[0], w)), [W]


def _forward_deform(rng):
    spec, W = _grid_setup(rng)
    tr = canonicalizing_transforms(_SKEL, _random_pose(rng))
    x = _body_points(rng, 6, spec)
    w = _probe(rng, (6, 3))
    return (lambda a, m: _scalar(forward_deform(a, tr, m, spec), w)), [x, W]


def _cycle(rng):
    spec, W = _grid_setup(rng)
    tr = canonicalizing_transforms(_SKEL, _random_pose(rng))
    x_p = forward_deform(_body_points(rng, 5, spec), tr, W, spec).data
    w = _probe(rng, (5,))
    return (lambda m: _scalar(cycle_residual(x_p, tr, m, spec), w)), [W]


def _sample_canonical(rng):
    spec, W = _grid_setup(rng)
    x = _body_points(rng, 6, spec)
    w = _probe(rng, (6, _SKEL.joint_count))
    return (lambda a, m: _scalar(sample_canonical(m, spec, a), w)), [x, W]


def _bias(rng):
    spec, W = _grid_setup(rng)
    b = rng.normal(size=W.shape) * 0.3
    d = rng.normal(size=W.shape) * 0.3
    w = _probe(rng, W.shape)
    return (lambda x, y: _scalar(F.softmax(combine_correction(apply_learned_bias(W, x), y), axis=0), w)), [b, d]


def _camera(rng) -> Camera:
    intr = Intrinsics(40.0, 40.0, 16.0, 16.0, 32, 32)
    theta = rng.uniform(0, 2 * np.pi)
    eye = np.array([2.6 * np.sin(theta), 0.8, 2.6 * np.cos(theta)])
    return Camera(intr, Extrinsics.look_at(eye, np.array([0.0, 0.78, 0.0])))


def _project(rng):
    cam = _camera(rng)
    x = _body_points(rng, 5, None)
    w = _probe(rng, (5, 2))
    return (lambda a: _scalar(project_tensor(a, cam.intr, cam.extr)[0], w)), [x]


def _featuremap_sample(rng):
    data = rng.normal(size=(3, 8, 8))
    intr = Intrinsics(10.0, 10.0, 4.0, 4.0, 8, 8)
    uv = np.stack([_frac(rng, 5, 8), _frac(rng, 5, 8)], axis=1)
    w = _probe(rng, (5, 3))
    return (lambda f, c: _scalar(sample_featuremap(FeatureMap(f, intr), c), w)), [data, uv]


def _unproject(rng):
    spec, W = _grid_setup(rng)
    cam = _camera(rng)
    intr = cam.intr.scaled(4)
    tr = canonicalizing_transforms(_SKEL, _random_pose(rng))
    data = rng.normal(size=(2, intr.height, intr.width))
    w = _probe(rng, (2,) + tuple(spec.resolution))
    return (lambda f: _scalar(unproject_undeform(FeatureMap(f, intr), tr, cam, W, spec)[0], w)), [data]


def _triplane(rng):
    spec = GridSpec.for_skeleton(_SKEL, 0.15, (4, 4, 4))
    planes = rng.normal(size=(3, 2, 5, 5))
    x = _body_points(rng, 6, spec)
    w = _probe(rng, (6, 2))
    return (lambda p, a: _scalar(sample_triplane(p, spec.box, a), w)), [planes, x]


def _volume(rng):
    spec = GridSpec.for_skeleton(_SKEL, 0.15, (5, 6, 4))
    V = rng.normal(size=(2, 5, 6, 4))
    x = _body_points(rng, 6, spec)
    w = _probe(rng, (6, 2))
    return (lambda v, a: _scalar(sample_volume(v, spec, a), w)), [V, x]


def _posenc(rng):
    x = rng.normal(size=(4, 3)) * 0.5
    w = _probe(rng, (4, 3 * 9))
    return (lambda a: _scalar(positional_encode(a, 4), w)), [x]


def _composite(rng):
    r, m = 3, 6
    sigma = np.abs(rng.normal(size=(r, m))) * 2
    rgb = rng.uniform(0.1, 0.9, size=(r, m, 3))
    deltas = rng.uniform(0.02, 0.2, size=(r, m))
    bg = rng.uniform(size=3)
    w1, w2, w3 = _probe(rng, (r, 3)), _probe(rng, (r,)), _probe(rng, (r, m))

    def fn(s, c):
        col, op, wt = composite(s, c, deltas, bg)
        return F.add(F.add(_scalar(col, w1), _scalar(op, w2)), _scalar(wt, w3))
    return fn, [sigma, rgb]


def _losses(rng):
    pred = rng.uniform(size=(2, 6, 6, 3))
    gt = rng.uniform(size=(2, 6, 6, 3))
    # keep image-gradient differences away from the L1 kink
    d = rng.uniform(0.1, 0.4, size=(5,)) * np.sign(rng.normal(size=5))
    dist = rng.uniform(size=(3, 2, 2))
    W = rng.uniform(size=(3, 2, 2))
    eta = 0.05
    dd = np.where(np.abs(d) < eta + 0.02, eta + 0.1, np.abs(d))
    dd[::2] = 0.01

    def fn(p, r, m):
        total = loss_mse(F.reshape(p, (-1, 3)), gt.reshape(-1, 3))
        total = F.add(total, thresholded_mean(r, eta))
        return F.add(total, loss_near(m, dist))
    return fn, [pred, dd, W]


def _proxy(rng):
    gt = rng.uniform(size=(1, 6, 6, 3))
    # pred = gt + a smooth ramp so no gradient difference sits at zero
    ramp = np.linspace(0.3, 0.9, 6)
    pred = gt + 0.5 * ramp[None, :, None, None] + 0.7 * ramp[None, None, :, None] ** 2
    return (lambda p: gradient_proxy_loss(p, gt)), [pred]


# -- modules --------------------------------------------------------------------
def _module_case(make):
    def build(rng):
        with precision(np.float64):
            mod, inputs, call = make(rng)
        probe = call(mod, *[Tensor(a) for a in inputs])
        w = _probe(rng, probe.shape)
        params = mod.parameters()

        def loss():
            return _scalar(call(mod, *[Tensor(a) for a in inputs]), w)
        return loss, params
    return build


def _make_linear(rng):
    return Linear(3, 4, rng), [rng.normal(size=(5, 3))], lambda m, x: m(x)


def _make_layernorm(rng):
    m = LayerNorm(5)
    m.gamma.data = rng.normal(size=5)
    m.beta.data = rng.normal(size=5)
    return m, [rng.normal(size=(4, 5))], lambda mod, x: mod(x)


def _make_groupnorm(rng):
    m = GroupNorm(4, 2)
    m.gamma.data = rng.normal(size=4)
    m.beta.data = rng.normal(size=4)
    return m, [rng.normal(size=(1, 4, 3, 3, 2))], lambda mod, x: mod(x)


def _make_conv(rng):
    return Conv(2, 3, 3, rng, dims=3, padding=1), [rng.normal(size=(1, 2, 3, 4, 3))], lambda m, x: m(x)


def _make_convt(rng):
    return ConvTranspose(2, 2, 2, rng, dims=3, stride=2), [rng.normal(size=(1, 2, 2, 2, 2))], lambda m, x: m(x)


def _make_attention(rng):
    att = MultiHeadAttention(8, 2, rng)
    q = [rng.normal(size=(3, 8))]
    keys = [rng.normal(size=(3, 8)) for _ in range(3)]
    mask = rng.uniform(size=(3, 3)) > 0.3
    mask[:, 0] = True
    return att, q + keys, lambda m, q0, *ks: m([q0], list(ks), mask)[0]


def _make_radiance(rng):
    mlp = RadianceMLP(5, rng, width=8, depth=3, skip=2, density_scale=2.0, freqs=2)
    x = rng.uniform(-1, 1, size=(4, 3))
    f = rng.normal(size=(4, 5))

    def call(m, a, b):
        sig, rgb = m(a, b)
        return F.concat([F.reshape(sig, (-1, 1)), rgb], axis=1)
    return mlp, [x, f], call


@dataclass
class CaseResult:
    name: str
    instances: int
    max_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


FUNCTION_CASES: Dict[str, Case] = {
    "add": _binary(F.add),
    "sub": _binary(F.sub),
    "mul": _binary(F.mul),
    "div": _binary(F.div, lambda r: _away(r, (1, 4), gap=0.5) + 0.0),
    "neg": _unary(F.neg),
    "power": _unary(lambda a: F.power(a, 2.5), lambda r: r.uniform(0.5, 2.0, (3, 4))),
    "square": _unary(F.square),
    "exp": _unary(F.exp),
    "log": _unary(F.log, lambda r: r.uniform(0.3, 3.0, (3, 4))),
    "sqrt": _unary(F.sqrt, lambda r: r.uniform(0.3, 3.0, (3, 4))),
    "relu": _unary(F.relu, lambda r: _away(r, (3, 4))),
    "sigmoid": _unary(F.sigmoid),
    "softplus": _unary(F.softplus),
    "tanh": _unary(F.tanh),
    "sin": _unary(F.sin),
    "cos": _unary(F.cos),
    "where": _where,
    "matmul": _matmul,
    "linear": _linear,
    "sum": _reduce(F.sum, axis=1),
    "mean": _reduce(F.mean, axis=(0, 2)),
    "sum_symmetric": _sum_symmetric,
    "cumsum": _cumsum,
    "softmax": _softmax,
    "layer_norm": _layer_norm,
    "group_norm": _group_norm,
    "reshape_transpose_broadcast": _shape_ops,
    "take_scatter_index": _indexing,
    "concat_stack": _joins,
    "norm": _norm,
    "conv2d": _conv(2),
    "conv3d": _conv(3),
    "conv_transpose2d": _conv_transpose(2),
    "conv_transpose3d": _conv_transpose(3),
    "upsample_nearest": _upsample,
    "interp_bilinear": _interp(2),
    "interp_trilinear": _interp(3),
    "positional_encode": _posenc,
    "project": _project,
    "sample_featuremap": _featuremap_sample,
    "unproject_undeform": _unproject,
    "sample_triplane": _triplane,
    "sample_volume": _volume,
    "sample_canonical": _sample_canonical,
    "weight_bias_softmax": _bias,
    "backward_deform": _backward_deform,
    "forward_deform": _forward_deform,
    "cycle_residual": _cycle,
    "composite": _composite,
    "losses": _losses,
    "gradient_proxy": _proxy,
}

MODULE_CASES: Dict[str, Case] = {
    "Linear": _module_case(_make_linear),
    "LayerNorm": _module_case(_make_layernorm),
    "GroupNorm": _module_case(_make_groupnorm),
    "Conv3d": _module_case(_make_conv),
    "ConvTranspose3d": _module_case(_make_convt),
    "MultiHeadAttention": _module_case(_make_attention),
    "RadianceMLP": _module_case(_make_radiance),
}


def case_names() -> List[str]:
    return list(FUNCTION_CASES) + list(MODULE_CASES)


def run_case(name: str, instances: int = 20, seed: int = 0) -> CaseResult:
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, i, sum(map(ord, name))])
        if name in FUNCTION_CASES:
            fn, point = FUNCTION_CASES[name](rng)
            err = grad_check(fn, point, max_coords=MAX_COORDS, rng=rng)
        else:
            loss, params = MODULE_CASES[name](rng)
            err = param_grad_check(loss, params, max_coords=6, rng=rng)
        worst = max(worst, err)
    return CaseResult(name, instances, worst, time.perf_counter() - t0)


def run_suite(instances: int = 20, seed: int = 0, names: Optional[Sequence[str]] = None,
              report: Optional[Callable[[CaseResult], None]] = None) -> List[CaseResult]:
    out = []
    for name in names or case_names():
        res = run_case(name, instances, seed)
        if report is not None:
            report(res)
        out.append(res)
    return out
