import json
import subprocess
import sys

import numpy as np
import pytest

from posefield.cli import main
from posefield.io import read_ppm

TINY = dict(grid=[8, 8, 4], unet_widths=[4, 8, 8], unet_heads=2, cnn_width=4, latent_dim=16, triplane_res=8,
            fusion_dim=16, fusion_hidden=16, fusion_heads=2, nerf_width=16, nerf_depth=2, nerf_skip=1,
            n_samples=8)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--out", str(data), "--subjects", "3", "--test-subjects", "1", "--frames", "8",
                 "--cameras", "2", "--resolution", "32x32", "--seed", "1"]) == 0
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"model": TINY, "train": {"patches": 1, "patch_size": 8}}))
    assert main(["train", str(data), "--out", str(root / "run"), "--iters", "2", "--config", str(cfg)]) == 0
    return root


def test_synth_layout(workspace):
    subjects = sorted(p.name for p in (workspace / "data").iterdir())
    assert subjects == ["subject_000", "subject_001", "subject_002"]
    assert len(list((workspace / "data" / "subject_000" / "images").glob("*.ppm"))) == 16


def test_train_writes_checkpoint_and_log(workspace):
    run = workspace / "run"
    assert (run / "model.ckpt").exists()
    lines = (run / "model.log").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("iter=1 ")


def test_resume_continues_iteration_count(workspace, tmp_path):
    cfg = workspace / "cfg.json"
    assert main(["train", str(workspace / "data"), "--out", str(tmp_path), "--iters", "1", "--config", str(cfg),
                 "--resume", str(workspace / "run" / "model.ckpt")]) == 0
    assert (tmp_path / "model.log").read_text().startswith("iter=2 ")


def test_render_writes_ppm(workspace, capsys):
    manifest = workspace / "data" / "subject_002" / "manifest.txt"
    assert main(["render", str(manifest), "--checkpoint", str(workspace / "run" / "model.ckpt"),
                 "--out", str(workspace / "renders"), "--frame", "6", "--camera", "1", "--views", "1"]) == 0
    img = read_ppm(workspace / "renders" / "subject_002_f006_c01.ppm")
    assert img.shape == (32, 32, 3)
    assert "wrote" in capsys.readouterr().out


def test_eval_prints_table(workspace, capsys):
    assert main(["eval", str(workspace / "data"), "--checkpoint", str(workspace / "run" / "model.ckpt"),
                 "--views", "2", "--targets", "1", "--out", str(workspace / "ev")]) == 0
    out = capsys.readouterr().out
    assert "1 test subjects" in out
    assert (workspace / "ev" / "eval.txt").read_text().count("\n") >= 3


def test_eval_without_test_split_fails(workspace, capsys):
    manifest = workspace / "data" / "subject_000" / "manifest.txt"
    assert main(["eval", str(manifest), "--checkpoint", str(workspace / "run" / "model.ckpt")]) == 1
    assert "nothing to evaluate" in capsys.readouterr().err


def test_missing_inputs_are_reported(tmp_path, capsys):
    assert main(["train", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 1
    assert main(["render", str(tmp_path / "m.txt"), "--checkpoint", "x", "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert err.count("error:") == 2


def test_bad_arguments_exit_with_usage(capsys):
    with pytest.raises(SystemExit) as e:
        main(["synth"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["synth", "--out", "x", "--resolution", "big"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["fly"])
    assert e.value.code == 2


def test_gradcheck_subset(capsys):
    assert main(["gradcheck", "--instances", "2", "--only", "add", "softmax"]) == 0
    out = capsys.readouterr().out
    assert "max relative error" in out and out.count(" ok") == 2
    assert main(["gradcheck", "--only", "nonsense"]) == 1


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "posefield", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for verb in ("synth", "train", "render", "eval", "gradcheck"):
        assert verb in res.stdout
