"""End-to-end acceptance checks. Each test records one PASS/FAIL line that is
printed in the terminal summary; the slow training fixtures (5 to 7) take
most of the runtime."""

import filecmp
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import conv3d_loops, dyadic_unprojection_setup, slab_opacity, unproject_loops
from posefield.autodiff import Tensor, conv, no_grad, precision
from posefield.body import Pose, Skeleton, axis_angle_to_quat, canonicalizing_transforms, humanoid12, nearest_bone
from posefield.camera import sample_rays_in_box
from posefield.body import Box
from posefield.deformation import backward_deform, cycle_residual, forward_deform
from posefield.encoder import unproject_undeform
from posefield.gradsuite import TOLERANCE, case_names, run_suite
from posefield.io import load_checkpoint, read_ppm, save_checkpoint, write_ppm
from posefield.model import ModelConfig, Observation, PoseFieldModel
from posefield.motion_weights import GridSpec, init_heuristic, posed_weights
from posefield.renderer import composite
from posefield.synthetic import (
    build_dataset,
    find_manifests,
    generate_subject,
    load_subject,
    oracle_render,
    ring_cameras,
    sample_motion,
)
from posefield.training import Batch, TrainConfig, Trainer, psnr, train
from posefield.workflow import evaluate, make_sampler, split_subjects

SK = humanoid12()


def record(number, title, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {number} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
    print(ACCEPTANCE_LINES[-1])
    return ok


def random_pose(rng, k=12, deg=45.0):
    q = axis_angle_to_quat(rng.normal(size=(k, 3)), np.deg2rad(deg) * rng.uniform(size=k))
    return Pose(q, rng.normal(size=3) * 0.05)


# ---------------------------------------------------------------------------
# 1. gradient suite
# ---------------------------------------------------------------------------
def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    results = run_suite(instances=20, seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_error)
    failed = [r.name for r in results if not r.passed]
    ok = not failed and elapsed < 300 and all(r.instances >= 20 for r in results)
    record(1, "gradient suite", ok, f"{len(results)} operations x 20 instances, worst {worst.name} "
           f"{worst.max_error:.2e} (< {TOLERANCE:g}), {elapsed:.0f}s (< 300s)"
           + (f", failing {failed}" if failed else ""))
    assert set(r.name for r in results) == set(case_names())
    assert ok


# ---------------------------------------------------------------------------
# 2. oracle equivalence
# ---------------------------------------------------------------------------
def check_conv3d():
    rng = np.random.default_rng(0)
    for c, o, size, k, stride, pad in [(2, 3, (5, 4, 6), 3, 1, 1), (3, 2, (6, 6, 5), 3, 2, 1), (1, 2, (4, 5, 3), 2, 1, 0)]:
        # small integers make every product and partial sum exact, so summation order cannot matter
        x = rng.integers(-8, 9, size=(c,) + size).astype(np.float64)
        w = rng.integers(-8, 9, size=(o, c, k, k, k)).astype(np.float64)
        b = rng.integers(-8, 9, size=o).astype(np.float64)
        with precision(np.float64):
            got = conv(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
        if not np.array_equal(got, conv3d_loops(x, w, b, stride, pad)):
            return False
    return True


def check_slab():
    worst = 0.0
    box = Box(np.full(3, -0.5), np.full(3, 0.5))
    s = sample_rays_in_box(np.array([[0.1, -0.2, -3.0]]), np.array([[0.0, 0, 1]]), box, 512)
    inside = (s.t > 2.75) & (s.t < 3.25)
    for sigma in (0.5, 2.0, 8.0, 30.0):
        with precision(np.float64):
            _, a, _ = composite(np.where(inside, sigma, 0.0), np.ones((1, 512, 3)), s.deltas)
        worst = max(worst, abs(a.data[0] - slab_opacity(sigma, 0.5)))
    return worst


def check_unprojection():
    for seed in range(10):
        spec, tr, W, cam, fmap = dyadic_unprojection_setup(np.random.default_rng(seed))
        with precision(np.float64):
            vol, valid = unproject_undeform(fmap, tr, cam, W, spec)
        ref, ref_valid = unproject_loops(fmap, tr, cam, W, spec)
        if not (np.array_equal(vol.data, ref) and np.array_equal(valid, ref_valid)):
            return False
    return True


def check_nearest_bone():
    x = np.random.default_rng(0).uniform([-0.9, 0, -0.3], [0.9, 1.6, 0.3], size=(300, 3))
    _, d, _ = nearest_bone(SK, x)
    s = np.linspace(0, 1, 20001)
    best = np.full(len(x), np.inf)
    for a, b in SK.bones:
        pts = SK.rest_positions[a] + s[:, None] * (SK.rest_positions[b] - SK.rest_positions[a])
        best = np.minimum(best, np.sqrt(((x[:, None] - pts[None]) ** 2).sum(-1)).min(axis=1))
    return float(np.abs(d - best).max())


def test_criterion_2_oracle_equivalence():
    conv_ok = check_conv3d()
    slab = check_slab()
    unproj_ok = check_unprojection()
    nb = check_nearest_bone()
    ok = conv_ok and slab < 1e-4 and unproj_ok and nb < 1e-3
    record(2, "oracle equivalence", ok, f"conv3d exact={conv_ok}, slab |dopacity|={slab:.1e} (< 1e-4), "
           f"unproject exact={unproj_ok}, nearest_bone {nb:.1e} (< 1e-3)")
    assert ok


# ---------------------------------------------------------------------------
# 3. deformation invariants
# ---------------------------------------------------------------------------
def test_criterion_3_deformation_invariants():
    rng = np.random.default_rng(0)
    spec = GridSpec.for_skeleton(SK, 0.15, (16, 16, 8))
    W0 = init_heuristic(SK, spec)
    x = rng.uniform(spec.box.lo, spec.box.hi, size=(500, 3))
    with precision(np.float64):
        ident = canonicalizing_transforms(SK, Pose.identity(12))
        x_c, free, _ = backward_deform(x, ident, W0, spec)
        identity_err = float(np.abs(x_c.data[~free] - x[~free]).max())

        bone = Skeleton(np.array([[0.0, 0, 0], [0, 1.0, 0]]), [-1, 0])
        bspec = GridSpec.for_skeleton(bone, 0.4, (4, 6, 4))
        bW = np.stack([np.ones((4, 6, 4)), np.zeros((4, 6, 4))])
        rigid_err, cycle = 0.0, 0.0
        for s in range(20):
            r = np.random.default_rng([1, s])
            q = np.array([axis_angle_to_quat(r.normal(size=3), r.uniform(0, 0.4)), [1.0, 0, 0, 0]])
            tr = canonicalizing_transforms(bone, Pose(q, r.normal(size=3) * 0.03))
            xp = r.uniform(-0.05, 0.05, size=(50, 3)) + [0, 0.5, 0]
            xc, _, _ = backward_deform(xp, tr, bW, bspec)
            rigid_err = max(rigid_err, float(np.abs(xc.data - (xp @ tr.R[0].T + tr.t[0])).max()))
            back = forward_deform(xc.data, tr, bW, bspec).data
            rigid_err = max(rigid_err, float(np.abs(back - xp).max()))
            cycle = max(cycle, float(cycle_residual(xp, tr, bW, bspec).data.max()))

        simplex = 0.0
        for s in range(20):
            tr = canonicalizing_transforms(SK, random_pose(np.random.default_rng([2, s])))
            w, free, _ = posed_weights(W0, spec, x, tr)
            simplex = max(simplex, float(np.abs(w.data.sum(axis=1)[~free] - 1).max()))
    # squared residuals at float64 round-off are ~1e-32; 1e-20 is the square of the rigid tolerance
    ok = identity_err < 1e-6 and rigid_err < 1e-10 and simplex < 1e-5 and cycle < 1e-20
    record(3, "deformation invariants", ok, f"identity {identity_err:.1e} (< 1e-6), rigid {rigid_err:.1e} "
           f"(< 1e-10), simplex {simplex:.1e} (< 1e-5), one-bone cycle {cycle:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 4. permutation invariance
# ---------------------------------------------------------------------------
def test_criterion_4_view_permutation():
    body = generate_subject(0)
    poses = sample_motion(SK, 16, 0)
    cams = ring_cameras(4, 64, 64)
    obs = [Observation(oracle_render(body, poses[f], cams[c])[0], cams[c], poses[f])
           for f, c in [(0, 0), (4, 1), (8, 2)]]
    captured = []
    with precision(np.float64), no_grad():
        model = PoseFieldModel(SK, ModelConfig.desk())
        # move the correction head off its zero initialisation so its output is informative
        for p in model.volumorph_dw.unet.head.parameters():
            p.data = np.random.default_rng(1).normal(size=p.shape) * 0.1
        nerf = model.nerf
        model.nerf = lambda x, f: (captured.append(f.data.copy()), nerf(x, f))[1]

        def run(order):
            enc = model.encode([obs[i] for i in order])
            model.render_patch(enc, poses[12], cams[3], (24, 16, 12, 12))
            return enc, captured[-1]

        ref, f_ref = run([0, 1, 2])
        same = True
        for order in ([1, 2, 0], [2, 0, 1], [2, 1, 0], [0, 2, 1]):
            enc, f = run(order)
            same &= all(np.array_equal(getattr(enc, n).data, getattr(ref, n).data) for n in ("V", "z", "delta"))
            same &= np.array_equal(f, f_ref)
    nonzero = bool(np.abs(ref.delta.data).max() > 0)
    ok = same and nonzero
    record(4, "view permutation", ok, f"V, z, dW and fused f bit-identical over 4 reorderings of 3 views: {same}")
    assert ok


# ---------------------------------------------------------------------------
# 5. overfit fixture
# ---------------------------------------------------------------------------
OVERFIT_ITERS = 2000
OVERFIT_CAMERAS = 16  # supervising ring; the held-out camera sits halfway between two of them
OVERFIT_MODEL = {}
OVERFIT_TRAIN = dict(lr_main=1e-3, lr_decay=0.1, patches=1, patch_size=16, noise_schedule=False,
                     motion_delay_iters=0)


def test_criterion_5_overfit():
    t0 = time.perf_counter()
    body = generate_subject(0)
    cams = ring_cameras(OVERFIT_CAMERAS, 64, 64)
    held = ring_cameras(1, 64, 64, start=np.pi / OVERFIT_CAMERAS)[0]
    poses = sample_motion(SK, 32, 0)
    observed = [0, 8]
    obs = [Observation(oracle_render(body, poses[i], cams[0])[0], cams[0], poses[i]) for i in observed]
    # supervision: the ring around the pose that the held-out camera looks at
    views = {c: oracle_render(body, poses[0], cams[c]) for c in range(OVERFIT_CAMERAS)}
    model = PoseFieldModel(SK, ModelConfig.desk(**OVERFIT_MODEL))
    trainer = Trainer(model, TrainConfig(iters=OVERFIT_ITERS, **OVERFIT_TRAIN))

    def sampler(rng, it):
        c = int(rng.integers(OVERFIT_CAMERAS))
        img, mask = views[c]
        return Batch(img, cams[c], poses[0], obs, mask)

    train(trainer, sampler, OVERFIT_ITERS)
    gt, _ = oracle_render(body, poses[0], held)
    with no_grad():
        img = model.render_image(model.encode(obs), poses[0], held)
    score = psnr(img, gt)
    minutes = (time.perf_counter() - t0) / 60
    ok = score >= 30.0 and minutes <= 30.0
    record(5, "overfit fixture", ok, f"held-out view PSNR {score:.2f} dB (>= 30) after {OVERFIT_ITERS} "
           f"iterations, {minutes:.1f} min (<= 30)")
    assert ok


# ---------------------------------------------------------------------------
# 6 and 7. generalisation fixture
# ---------------------------------------------------------------------------
GEN_FRAMES = 16
GEN_CAMERAS = 4
GEN_ITERS = 1500
GEN_MODEL = {}
GEN_TRAIN = dict(lr_main=1e-3, lr_motion=1e-3, lr_decay=0.1, patches=1, patch_size=16, views=2,
                 motion_delay_iters=500)
GEN_TARGETS = 4


def train_generalisation(subjects, use_correction):
    model = PoseFieldModel(SK, ModelConfig.desk(use_correction=use_correction, **GEN_MODEL))
    trainer = Trainer(model, TrainConfig(iters=GEN_ITERS, **GEN_TRAIN))
    train(trainer, make_sampler(subjects, trainer.config.views), GEN_ITERS)
    return model


@pytest.fixture(scope="module")
def generalisation(tmp_path_factory):
    root = tmp_path_factory.mktemp("gen")
    build_dataset(root, 10, GEN_FRAMES, ring_cameras(GEN_CAMERAS, 64, 64), n_test=2, seed=5)
    train_set, test_set = split_subjects([load_subject(p) for p in find_manifests(root)])
    assert len(train_set) == 8 and len(test_set) == 2
    return {"train": train_set, "test": test_set, "models": {}}


def gen_model(fixture, use_correction):
    if use_correction not in fixture["models"]:
        fixture["models"][use_correction] = train_generalisation(fixture["train"], use_correction)
    return fixture["models"][use_correction]


def test_criterion_6_more_views_help(generalisation):
    model = gen_model(generalisation, True)
    cells = evaluate(model, generalisation["test"], (1, 2), noise_deg=0.0, max_targets=GEN_TARGETS,
                     conditions=(False,))
    one, two = cells[0].psnr, cells[1].psnr
    ok = two >= one
    record(6, "generalisation trend", ok, f"held-out subjects, novel poses: 2 views {two:.2f} dB vs "
           f"1 view {one:.2f} dB ({cells[0].count} renders each)")
    assert ok


def test_criterion_7_correction_under_pose_noise(generalisation):
    full = gen_model(generalisation, True)
    ablation = gen_model(generalisation, False)
    kw = dict(view_counts=(1, 2), noise_deg=5.0, max_targets=GEN_TARGETS, conditions=(True,))
    with_dw = float(np.mean([c.psnr for c in evaluate(full, generalisation["test"], **kw)]))
    without = float(np.mean([c.psnr for c in evaluate(ablation, generalisation["test"], **kw)]))
    ok = with_dw >= without
    record(7, "robustness trend", ok, f"5 deg pose noise: with dW {with_dw:.2f} dB vs without "
           f"{without:.2f} dB")
    assert ok


# ---------------------------------------------------------------------------
# 8. determinism
# ---------------------------------------------------------------------------
def determinism_run(root):
    cams = ring_cameras(2, 32, 32)
    build_dataset(root, 2, 4, cams, n_test=1, seed=9)
    subjects = [load_subject(p) for p in find_manifests(root)]
    model = PoseFieldModel(SK, ModelConfig.desk())
    trainer = Trainer(model, TrainConfig(iters=10, patches=1, patch_size=16, motion_delay_iters=0, seed=3))
    train(trainer, make_sampler(subjects[:1], 2), 10)
    s = subjects[1]
    with no_grad():
        enc = model.encode([Observation(s.image(0, 0), s.cameras[0], s.pose(0))])
        img = model.render_image(enc, s.pose(3), s.cameras[1])
    return model.state_dict(), img


def test_criterion_8_determinism(tmp_path):
    a_state, a_img = determinism_run(tmp_path / "a")
    b_state, b_img = determinism_run(tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    data_same = all(filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False) for f in files)
    state_same = a_state.keys() == b_state.keys() and all(a_state[k].tobytes() == b_state[k].tobytes()
                                                          for k in a_state)
    img_same = a_img.tobytes() == b_img.tobytes()
    ok = data_same and state_same and img_same and len(files) > 0
    record(8, "determinism", ok, f"dataset ({len(files)} files) {data_same}, 10 training steps {state_same}, "
           f"full render {img_same}")
    assert ok


# ---------------------------------------------------------------------------
# 9. format round trips
# ---------------------------------------------------------------------------
def test_criterion_9_round_trips(tmp_path):
    rng = np.random.default_rng(0)
    ck_ok = ppm_ok = True
    for i in range(50):
        tensors = {f"t{j}": (rng.normal(size=tuple(rng.integers(1, 6, size=rng.integers(0, 4)))) * 10 ** rng.uniform(-5, 5))
                   .astype(np.float32) for j in range(rng.integers(1, 8))}
        tensors["special"] = np.array([0.0, -0.0, np.inf, -np.inf, 1e-45, np.nan], dtype=np.float32)
        it = int(rng.integers(0, 2 ** 62))
        cfg = {"i": i, "values": rng.normal(size=3).tolist()}
        save_checkpoint(tmp_path / "c.ckpt", tensors, it, cfg)
        back, it2, cfg2 = load_checkpoint(tmp_path / "c.ckpt")
        ck_ok &= it2 == it and cfg2 == cfg and back.keys() == tensors.keys()
        ck_ok &= all(back[k].shape == tensors[k].shape and back[k].tobytes() == tensors[k].tobytes() for k in tensors)
        img = rng.integers(0, 256, size=(rng.integers(1, 40), rng.integers(1, 40), 3), dtype=np.uint8)
        write_ppm(tmp_path / "i.ppm", img)
        ppm_ok &= np.array_equal(read_ppm(tmp_path / "i.ppm"), img)
    ok = bool(ck_ok and ppm_ok)
    record(9, "format round trips", ok, f"50 random checkpoints bit-exact {bool(ck_ok)}, "
           f"50 random PPM images bit-exact {bool(ppm_ok)}")
    assert ok
