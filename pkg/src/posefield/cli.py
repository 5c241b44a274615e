"""Command-line entry point: ``python3 -m posefield <verb> ...``.

Verbs: synth, train, render, eval, gradcheck.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence, Tuple

from .io import write_ppm
from .model import ModelConfig, PoseFieldModel
from .synthetic import (
    build_dataset,
    find_manifests,
    load_subject,
    observed_frame_indices,
    resized,
    ring_cameras,
)
from .training import Trainer, TrainConfig, train
from .workflow import (
    checkpoint_path,
    evaluate,
    format_table,
    load_model,
    make_sampler,
    save_model,
    split_subjects,
    subject_observations,
)


class CliError(Exception):
    pass


def _resolution(text: str) -> Tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError("resolution must be positive")
    return w, h


def _read_config(path: Optional[str]) -> dict:
    """JSON with optional "model" and "train" sections."""
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    data = json.loads(p.read_text())
    unknown = set(data) - {"model", "train", "desk"}
    if unknown:
        raise CliError(f"{p}: unknown config sections {sorted(unknown)}")
    return data


def _load_subjects(data: str):
    root = Path(data)
    if not root.exists():
        raise CliError(f"dataset or manifest not found: {root}")
    manifests = find_manifests(root)
    if not manifests:
        raise CliError(f"no manifests under {root}")
    return [load_subject(m) for m in manifests]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="python3 -m posefield",
                                description="Animatable human radiance fields from a few posed images.")
    sub = p.add_subparsers(dest="verb", metavar="{synth,train,render,eval,gradcheck}")
    sub.required = True

    s = sub.add_parser("synth", help="generate a synthetic multi-view dataset")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--subjects", type=int, default=10)
    s.add_argument("--test-subjects", type=int, default=2)
    s.add_argument("--frames", type=int, default=32)
    s.add_argument("--cameras", type=int, default=4)
    s.add_argument("--resolution", type=_resolution, default=(64, 64), metavar="WxH")

    t = sub.add_parser("train", help="train on the training split of a dataset")
    t.add_argument("data", help="dataset directory or a single manifest")
    t.add_argument("--out", required=True, help="output directory (or .ckpt path)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--config", help="JSON file with model/train overrides")
    t.add_argument("--iters", type=int, default=1000)
    t.add_argument("--views", type=int, default=2, help="observed views per batch")
    t.add_argument("--noise-deg", type=float, default=5.0, help="pose-noise curriculum magnitude")
    t.add_argument("--resume", help="checkpoint to continue from")

    r = sub.add_parser("render", help="render one frame of a subject")
    r.add_argument("manifest")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True, help="output directory for the PPM")
    r.add_argument("--frame", type=int, default=None, help="target frame (default: last)")
    r.add_argument("--camera", type=int, default=None, help="target camera (default: last)")
    r.add_argument("--views", type=int, default=2)
    r.add_argument("--noise-deg", type=float, default=0.0)
    r.add_argument("--resolution", type=_resolution, default=None, metavar="WxH")
    r.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", help="PSNR table over the test split")
    e.add_argument("data")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--views", type=int, default=4, help="evaluate 1..N observed views")
    e.add_argument("--noise-deg", type=float, default=5.0)
    e.add_argument("--targets", type=int, default=4, help="target frames per subject")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="directory for a copy of the table")

    g = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable operation")
    g.add_argument("--instances", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--only", nargs="*", help="restrict to these case names")
    return p


def cmd_synth(a) -> int:
    if a.test_subjects < 0 or a.test_subjects > a.subjects:
        raise CliError("--test-subjects must lie between 0 and --subjects")
    w, h = a.resolution
    cams = ring_cameras(a.cameras, w, h)
    paths = build_dataset(a.out, a.subjects, a.frames, cams, a.test_subjects, a.seed)
    print(f"wrote {len(paths)} subjects ({a.test_subjects} test) to {a.out}")
    return 0


def cmd_train(a) -> int:
    cfg = _read_config(a.config)
    subjects = _load_subjects(a.data)
    train_set, _ = split_subjects(subjects)
    if not train_set:
        raise CliError(f"no training subjects in {a.data}")
    desk = cfg.get("desk", True)
    tc = (TrainConfig.desk if desk else TrainConfig)(**{"iters": a.iters, "views": a.views, "noise_deg": a.noise_deg,
                                                         "seed": a.seed, **cfg.get("train", {})})
    out = Path(a.out)
    ckpt = checkpoint_path(out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    if a.resume:
        model, start, _ = load_model(a.resume)
    else:
        make = ModelConfig.desk if desk else ModelConfig
        model = PoseFieldModel(train_set[0].skeleton, make(**{"seed": a.seed, **cfg.get("model", {})}))
        start = 0
    with open(ckpt.with_suffix(".log"), "a", encoding="utf-8") as log:
        trainer = Trainer(model, tc, log)
        trainer.iteration = start
        every = max(1, tc.iters // 20)

        def report(it, res):
            if it % every == 0 or it == start + tc.iters - 1:
                print(f"iter {it}: loss {res.total:.5f} mse {res.l_mse:.5f} ({res.wall:.2f}s)", flush=True)
        train(trainer, make_sampler(train_set, tc.views), tc.iters, report)
    save_model(ckpt, model, trainer.iteration, tc)
    print(f"saved {ckpt}")
    return 0


def cmd_render(a) -> int:
    path = Path(a.manifest)
    if not path.exists():
        raise CliError(f"manifest not found: {path}")
    subject = load_subject(path)
    model, _, _ = load_model(a.checkpoint)
    frame = a.frame if a.frame is not None else subject.n_frames - 1
    cam_id = a.camera if a.camera is not None else max(subject.cameras)
    if cam_id not in subject.cameras:
        raise CliError(f"{path}: no camera {cam_id}")
    obs = subject_observations(subject, observed_frame_indices(subject.n_frames, a.views),
                               noise_deg=a.noise_deg, seed=a.seed)
    cam = subject.cameras[cam_id]
    if a.resolution is not None:
        cam = type(cam)(resized(cam.intr, *a.resolution), cam.extr)
    enc = model.encode(obs)
    img = model.render_image(enc, subject.pose(frame), cam)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    target = out / f"{subject.name or 'subject'}_f{frame:03d}_c{cam_id:02d}.ppm"
    write_ppm(target, img)
    print(f"wrote {target}")
    return 0


def cmd_eval(a) -> int:
    if not 1 <= a.views <= 4:
        raise CliError("--views must lie in 1..4")
    subjects = _load_subjects(a.data)
    _, test = split_subjects(subjects)
    if not test:
        raise CliError(f"no test subjects in {a.data}: nothing to evaluate")
    model, _, _ = load_model(a.checkpoint)
    cells = evaluate(model, test, range(1, a.views + 1), a.noise_deg, a.targets, a.seed)
    table = format_table(cells)
    print(f"{len(test)} test subjects, pose noise {a.noise_deg:g} deg")
    print(table)
    if a.out:
        Path(a.out).mkdir(parents=True, exist_ok=True)
        (Path(a.out) / "eval.txt").write_text(table + "\n")
    return 0


def cmd_gradcheck(a) -> int:
    from .gradsuite import TOLERANCE, case_names, run_suite

    names = a.only or case_names()
    bad = set(names) - set(case_names())
    if bad:
        raise CliError(f"unknown gradient cases: {sorted(bad)}")
    results = run_suite(a.instances, a.seed, names,
                        lambda r: print(f"{r.name:<30}{r.max_error:>12.3e}  {'ok' if r.passed else 'FAIL'}",
                                        flush=True))
    worst = max(r.max_error for r in results)
    print(f"max relative error {worst:.3e} over {len(results)} cases x {a.instances} instances "
          f"(tolerance {TOLERANCE:g})")
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.verb](args)
    except (CliError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
