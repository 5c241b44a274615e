"""Glue between datasets on disk, training and evaluation.

Holds model checkpointing, the batch sampler over training subjects and the
PSNR evaluation over held-out subjects.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import no_grad
from .body import Skeleton
from .io import load_checkpoint, save_checkpoint
from .model import ModelConfig, Observation, PoseFieldModel
from .synthetic import Subject, observed_frame_indices, target_frame_indices
from .training import Batch, TrainConfig, perturb_pose, psnr

OBSERVED_CAMERA = 0


# ---------------------------------------------------------------------------
# checkpoints of whole models
# ---------------------------------------------------------------------------
def skeleton_to_dict(skeleton: Skeleton) -> dict:
    return {"rest": skeleton.rest_positions.tolist(), "parent": skeleton.parent.tolist()}


def skeleton_from_dict(d: dict) -> Skeleton:
    return Skeleton(np.array(d["rest"], dtype=np.float64), np.array(d["parent"]))


def save_model(path, model: PoseFieldModel, iteration: int = 0, train_config: Optional[TrainConfig] = None) -> None:
    config = {"model": model.config.to_dict(), "skeleton": skeleton_to_dict(model.skeleton)}
    if train_config is not None:
        config["train"] = train_config.to_dict()
    save_checkpoint(path, model.state_dict(), iteration, config)


def load_model(path) -> Tuple[PoseFieldModel, int, dict]:
    tensors, iteration, config = load_checkpoint(path)
    if "model" not in config or "skeleton" not in config:
        raise ValueError(f"{path}: checkpoint lacks the model configuration")
    model = PoseFieldModel(skeleton_from_dict(config["skeleton"]), ModelConfig.from_dict(config["model"]))
    model.load_state_dict(tensors)
    return model, iteration, config


# ---------------------------------------------------------------------------
# sampling training batches
# ---------------------------------------------------------------------------
def subject_observations(subject: Subject, frames: Sequence[int], camera: int = OBSERVED_CAMERA,
                         noise_deg: float = 0.0, seed=0) -> List[Observation]:
    cam = subject.cameras[camera]
    out = []
    for k, f in enumerate(frames):
        pose = subject.pose(f)
        if noise_deg > 0:
            pose = perturb_pose(pose, noise_deg, [seed, f, k])
        out.append(Observation(subject.image(f, camera), cam, pose))
    return out


def make_sampler(subjects: Sequence[Subject], views: int) -> Callable[[np.random.Generator, int], Batch]:
    """Batches over training subjects: a random target frame and camera,
    ``views`` distinct observed frames seen from one random camera."""
    if not subjects:
        raise ValueError("no training subjects")

    def sampler(rng: np.random.Generator, it: int) -> Batch:
        s = subjects[rng.integers(len(subjects))]
        cams = sorted(s.cameras)
        obs_frames = rng.choice(s.n_frames, size=min(views, s.n_frames), replace=False)
        obs_cam = cams[rng.integers(len(cams))]
        target = int(rng.integers(s.n_frames))
        tcam = cams[rng.integers(len(cams))]
        img = s.image(target, tcam)
        return Batch(img, s.cameras[tcam], s.pose(target),
                     subject_observations(s, [int(f) for f in obs_frames], obs_cam), img.max(axis=2) > 0)
    return sampler


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------
@dataclass
class EvalCell:
    views: int
    noisy: bool
    psnr: float
    count: int


def evaluate_subject(model: PoseFieldModel, subject: Subject, views: int, noise_deg: float = 0.0,
                     max_targets: int = 4, seed: int = 0) -> List[float]:
    """PSNR of each rendered (target frame, camera) pair of the second half of
    the sequence, observing the first-half selector frames from camera 0."""
    obs = subject_observations(subject, observed_frame_indices(subject.n_frames, views),
                               noise_deg=noise_deg, seed=seed)
    targets = target_frame_indices(subject.n_frames)
    if max_targets and len(targets) > max_targets:
        targets = [targets[i] for i in np.linspace(0, len(targets) - 1, max_targets).round().astype(int)]
    cams = [c for c in sorted(subject.cameras) if c != OBSERVED_CAMERA] or sorted(subject.cameras)
    scores = []
    with no_grad():
        enc = model.encode(obs)
        for k, t in enumerate(targets):
            c = cams[k % len(cams)]
            img = model.render_image(enc, subject.pose(t), subject.cameras[c])
            scores.append(psnr(img, subject.image(t, c)))
    return scores


def evaluate(model: PoseFieldModel, subjects: Sequence[Subject], view_counts: Sequence[int] = (1, 2, 3, 4),
             noise_deg: float = 5.0, max_targets: int = 4, seed: int = 0,
             conditions: Sequence[bool] = (False, True)) -> List[EvalCell]:
    if not subjects:
        raise ValueError("no test subjects to evaluate")
    cells = []
    for v in view_counts:
        for noisy in conditions:
            scores = []
            for s in subjects:
                scores += evaluate_subject(model, s, v, noise_deg if noisy else 0.0, max_targets, seed)
            cells.append(EvalCell(v, noisy, float(np.mean(scores)), len(scores)))
    return cells


def format_table(cells: Sequence[EvalCell]) -> str:
    rows: Dict[int, Dict[bool, float]] = {}
    for c in cells:
        rows.setdefault(c.views, {})[c.noisy] = c.psnr
    lines = [f"{'observed views':<16}{'accurate PSNR':>15}{'noisy PSNR':>13}"]
    for v in sorted(rows):
        acc = rows[v].get(False)
        noisy = rows[v].get(True)
        fmt = lambda x: f"{x:.2f}" if x is not None else "-"  # noqa: E731
        lines.append(f"{v:<16}{fmt(acc):>15}{fmt(noisy):>13}")
    return "\n".join(lines)


def split_subjects(subjects: Sequence[Subject]) -> Tuple[List[Subject], List[Subject]]:
    train = [s for s in subjects if s.split != "test"]
    test = [s for s in subjects if s.split == "test"]
    return train, test


def checkpoint_path(out: Path) -> Path:
    return out / "model.ckpt" if out.suffix == "" else out
