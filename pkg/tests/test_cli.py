import json
from pathlib import Path

import pytest

from xdyna.cli import main


def tree_bytes(root: Path) -> dict:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), "--human", "3", "--scene", "1",
                 "--seed", "7"]) == 0
    config = {
        "stage": 1,
        "manifest": str(root / "data" / "manifest.json"),
        "out_dir": str(root / "train1"),
        "learning_rate": 1e-3,
        "max_steps": 4,
        "seed": 3,
        "arch": {"dtype": "float32"},
        "schedule": {"timesteps": 25},
    }
    cfg_path = root / "train.json"
    cfg_path.write_text(json.dumps(config))
    assert main(["train", "--config", str(cfg_path)]) == 0
    return root


def test_gen_data_byte_identical_rerun(tmp_path):
    for d in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / d), "--human", "2", "--scene", "1",
                     "--seed", "5"]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_run_record_written(workspace):
    record = json.loads((workspace / "data" / "run.json").read_text())
    assert record["subcommand"] == "gen-data"
    assert record["seed"] == 7
    assert "tree" in record["output_hashes"]


def test_train_stage2_without_ckpt_exits_2(workspace, capsys):
    code = main(["train", "--config", str(workspace / "train.json"), "--stage", "2",
                 "--manifest", str(workspace / "data" / "manifest.json"),
                 "--out", str(workspace / "t2")])
    assert code == 2
    assert "stage-1 checkpoint required" in capsys.readouterr().err


def test_train_unknown_override_exits_2(workspace, capsys):
    code = main(["train", "--config", str(workspace / "train.json"),
                 "--set", "no_such_key=1"])
    assert code == 2
    assert "unknown config key" in capsys.readouterr().err


def test_unknown_flag_exits_2(workspace):
    assert main(["gen-data", "--out", "x", "--bogus"]) == 2


def test_missing_manifest_exits_3(workspace, tmp_path, capsys):
    code = main(["train", "--config", str(workspace / "train.json"),
                 "--manifest", str(tmp_path / "missing.json"),
                 "--out", str(tmp_path / "out")])
    assert code == 3


def test_animate_and_live_photo_deterministic(workspace, tmp_path):
    ckpt = str(workspace / "train1" / "stage1.ckpt")
    driving = str(workspace / "data" / "human_000")
    for d in ("g1", "g2"):
        assert main(["animate", "--ckpt", ckpt, "--ref", driving,
                     "--driving", driving, "--no-face",
                     "--out", str(tmp_path / d), "--steps", "3", "--seed", "11"]) == 0
    assert tree_bytes(tmp_path / "g1") == tree_bytes(tmp_path / "g2")

    for d in ("l1", "l2"):
        assert main(["live-photo", "--ckpt", ckpt, "--ref", driving, "--gif",
                     "--out", str(tmp_path / d), "--frames", "4", "--steps", "3",
                     "--seed", "2"]) == 0
    assert tree_bytes(tmp_path / "l1") == tree_bytes(tmp_path / "l2")
    assert (tmp_path / "l1" / "generated.gif").exists()


def test_evaluate_identical_dirs(workspace, tmp_path):
    data = str(workspace / "data")
    out = tmp_path / "eval"
    assert main(["evaluate", "--pred", data, "--gt", data, "--out", str(out),
                 "--expr-step", "0.5"]) == 0
    report = (out / "report.csv").read_text()
    rows = {tuple(line.split(",")[:2]): float(line.split(",")[2])
            for line in report.strip().splitlines()[1:]}
    assert rows[("l1", "whole")] == 0.0
    assert rows[("fd", "whole")] == 0.0
    assert abs(rows[("ssim", "whole")] - 1.0) < 1e-12
    assert rows[("face_det", "face")] == 100.0
    assert (out / "report.md").exists()


def test_evaluate_rerun_byte_identical(workspace, tmp_path):
    data = str(workspace / "data")
    for d in ("e1", "e2"):
        assert main(["evaluate", "--pred", data, "--gt", data, "--out", str(tmp_path / d),
                     "--no-face-metrics"]) == 0
    assert tree_bytes(tmp_path / "e1") == tree_bytes(tmp_path / "e2")


def test_grad_check_cli(tmp_path):
    out = tmp_path / "gc"
    assert main(["grad-check", "--out", str(out), "--samples", "25", "--seed", "1"]) == 0
    text = (out / "grad_check.csv").read_text()
    assert "adapter" in text and "temporal" in text


def test_train_rerun_byte_identical(workspace, tmp_path):
    config = json.loads((workspace / "train.json").read_text())
    for d in ("r1", "r2"):
        config["out_dir"] = str(tmp_path / d)
        cfg_path = tmp_path / f"{d}.json"
        cfg_path.write_text(json.dumps(config))
        assert main(["train", "--config", str(cfg_path)]) == 0
    a, b = tree_bytes(tmp_path / "r1"), tree_bytes(tmp_path / "r2")
    # run.json embeds the differing out_dir; checkpoint and curve must match
    assert a["stage1.ckpt"] == b["stage1.ckpt"]
    assert a["loss_curve.csv"] == b["loss_curve.csv"]
