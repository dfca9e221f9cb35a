import json
import subprocess
import sys

import numpy as np
import pytest

from utsrmorph.cli import field_to_rgb, jacobian_to_gray, main
from utsrmorph.volume_io import (DisplacementField, LandmarkSet, read_field, read_volume, write_field,
                                 write_landmarks)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    spec.write_text(json.dumps({"dims": [32, 32, 32], "n_subjects": 2, "radius_range": [4, 7],
                                "amplitude": 3.0, "smoothness": 6.0}))
    assert main(["gen-synth", "--spec", str(spec), "--out", str(root / "data"), "--seed", "1"]) == 0
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"max_iterations": 2, "checkpoint_every": 1, "model": {"variant": "S"},
                               "loss": {"lambda": 0.5}}))
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


def test_gen_synth_layout(workspace):
    index = json.loads((workspace / "data" / "dataset.json").read_text())
    assert index["subjects"] == ["subject_000", "subject_001"]
    for stem in index["subjects"]:
        for part in ("image", "labels", "deformation"):
            assert (workspace / "data" / f"{stem}_{part}.json").exists()


def test_train_outputs(workspace):
    run = workspace / "run"
    saved = json.loads((run / "config.json").read_text())
    assert saved["loss"]["lam"] == 0.5 and saved["model"]["variant"] == "S"
    assert (run / "ckpt_000001.bin").exists() and (run / "ckpt_000002.json").exists()
    assert len((run / "loss_trace.csv").read_text().splitlines()) == 3


def test_register_eval_plot(workspace, capsys):
    d, run = workspace / "data", workspace / "run"
    out_field, out_warped = workspace / "reg_field", workspace / "reg_warped"
    assert main(["register", "--ckpt", str(run / "ckpt_000002"), "--moving", str(d / "subject_000_image"),
                 "--fixed", str(d / "subject_001_image"), "--out-field", str(out_field),
                 "--out-warped", str(out_warped)]) == 0
    assert read_field(out_field).values.shape == (32, 32, 32, 3)
    assert read_volume(out_warped).dims == (32, 32, 32)

    names = ["a", "b"]
    write_landmarks(LandmarkSet(names, np.array([[10.0, 10, 10], [20, 12, 8]])), workspace / "lm_f")
    write_landmarks(LandmarkSet(names, np.array([[10.0, 10, 10], [20, 12, 8]])), workspace / "lm_m")
    capsys.readouterr()
    assert main(["eval", "--fixed", str(d / "subject_001_image"), "--warped", str(out_warped),
                 "--field", str(out_field), "--fixed-mask", str(d / "subject_001_labels"),
                 "--warped-mask", str(d / "subject_001_labels"), "--landmarks-fixed", str(workspace / "lm_f"),
                 "--landmarks-moving", str(workspace / "lm_m")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["dsc_mean"] == 1.0 and set(report["dsc"]) == {"1", "2", "3"}
    assert {"hd95", "fold_pct", "sdlogj", "tre_mean", "tre_sd"} <= set(report)

    stem = workspace / "slice"
    assert main(["plot", "--field", str(out_field), "--axis", "z", "--slice", "16", "--out", str(stem)]) == 0
    ppm = (workspace / "slice.ppm").read_bytes()
    assert ppm.startswith(b"P6\n32 32\n255\n") and len(ppm) == len(b"P6\n32 32\n255\n") + 32 * 32 * 3
    assert (workspace / "slice_jacobian.pgm").read_bytes().startswith(b"P5\n32 32\n255\n")


def test_eval_writes_report_file(workspace, tmp_path):
    d = workspace / "data"
    out = tmp_path / "report.json"
    assert main(["eval", "--fixed", str(d / "subject_001_image"), "--warped", str(d / "subject_000_image"),
                 "--fixed-mask", str(d / "subject_001_labels"), "--warped-mask", str(d / "subject_000_labels"),
                 "--out", str(out)]) == 0
    assert 0 < json.loads(out.read_text())["dsc_mean"] < 1


def test_runtime_errors_exit_1(workspace, tmp_path, capsys):
    assert main(["register", "--ckpt", str(tmp_path / "missing"), "--moving", "a", "--fixed", "b",
                 "--out-field", "c", "--out-warped", "d"]) == 1
    assert "utsrmorph register" in capsys.readouterr().err
    u = tmp_path / "u"
    write_field(DisplacementField(np.zeros((4, 4, 4, 3), np.float32)), u)
    assert main(["plot", "--field", str(u), "--slice", "9", "--out", str(tmp_path / "p")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"max_iterations": 1, "warmup": 3}))
    assert main(["train", "--config", str(bad), "--data", str(workspace / "data"), "--out", str(tmp_path)]) == 1
    assert "warmup" in capsys.readouterr().err


def test_usage_errors_exit_2(capsys):
    assert main(["train"]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["plot", "--field", "x", "--slice", "1", "--out", "y", "--axis", "w"]) == 2


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "utsrmorph.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gen-synth" in proc.stdout


def test_field_to_rgb_zero_is_midgray():
    assert (field_to_rgb(np.zeros((3, 3, 3))) == 128).all()
    rgb = field_to_rgb(np.array([[[-2.0, 0.0, 2.0]]]))
    assert rgb.tolist() == [[[0, 128, 255]]]


def test_jacobian_to_gray_folds_are_black():
    g = jacobian_to_gray(np.array([[-0.5, 0.0, 1.0, 2.0]]))
    assert g.tolist() == [[0, 0, 128, 255]]
