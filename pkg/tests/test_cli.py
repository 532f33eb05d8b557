import json
import os
import re

import numpy as np
import pytest

from assembler.cli import dispatch, worker_count
from assembler.plotting import PALETTE


def run(capsys, *argv):
    code = dispatch(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


# ------------------------------------------------------------------ dispatch

def test_unknown_subcommand(capsys):
    code, _, err = run(capsys, "frobnicate")
    assert code == 1
    assert "usage" in err.lower()


def test_missing_required_flag(capsys):
    code, _, err = run(capsys, "toygen", "--out", "/tmp/x")
    assert code == 1


def test_toygen_smoke(tmp_path, capsys):
    out = tmp_path / "toy"
    code, stdout, _ = run(capsys, "toygen", "--n", "10", "--family", "lamp",
                          "--out", str(out))
    assert code == 0
    assert "10 records" in stdout
    with open(out / "manifest.json") as fh:
        manifest = json.load(fh)
    assert len(manifest["records"]) == 10
    assert (out / "effective-config.json").exists()
    assert (out / "run.log").exists()


def test_effective_config_contents(tmp_path, capsys):
    out = tmp_path / "toy"
    code, _, _ = run(capsys, "toygen", "--n", "3", "--family", "stack",
                     "--seed", "7", "--out", str(out))
    assert code == 0
    with open(out / "effective-config.json") as fh:
        cfg = json.load(fh)
    assert cfg["seed"] == 7
    assert cfg["n"] == 3
    assert cfg["family"] == "stack"
    assert "func" not in cfg


def test_config_file_and_override(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"n": 4, "family": "lamp"}))
    out = tmp_path / "toy"
    code, stdout, _ = run(capsys, "toygen", "--n", "1", "--out", str(out),
                          "--config", str(cfg_path), "--override", "n=5")
    assert code == 0
    assert "5 records" in stdout  # override beats config beats flag default


def test_unknown_config_key(tmp_path, capsys):
    code, _, err = run(capsys, "toygen", "--n", "1", "--out", str(tmp_path / "t"),
                       "--override", "bogus_key=1")
    assert code == 1
    assert "bogus_key" in err


def test_malformed_override(tmp_path, capsys):
    code, _, err = run(capsys, "toygen", "--n", "1", "--out", str(tmp_path / "t"),
                       "--override", "nonsense")
    assert code == 1


def test_worker_count_env(monkeypatch):
    monkeypatch.delenv("ASSEMBLER_THREADS", raising=False)
    default = worker_count()
    assert default >= 1
    monkeypatch.setenv("ASSEMBLER_THREADS", "1")
    assert worker_count() == 1


# ---------------------------------------------------------------------- eval

def test_eval_missing_pred_dir(tmp_path, capsys):
    out = tmp_path / "toy"
    run(capsys, "toygen", "--n", "3", "--family", "lamp", "--out", str(out))
    code, _, err = run(capsys, "eval", "--pred", str(tmp_path / "none"),
                       "--gt", str(out), "--out", str(tmp_path / "rep"))
    assert code == 2


def test_eval_mismatched_ids(tmp_path, capsys):
    out = tmp_path / "toy"
    run(capsys, "toygen", "--n", "3", "--family", "lamp", "--out", str(out))
    pred = tmp_path / "pred"
    (pred / "lamp_00000").mkdir(parents=True)
    code, _, err = run(capsys, "eval", "--pred", str(pred), "--gt", str(out),
                       "--out", str(tmp_path / "rep"))
    assert code == 2
    assert "lamp_00001" in err and "lamp_00002" in err


# ------------------------------------------------------------------ assemble

def test_assemble_inject_target(tmp_path, capsys):
    data = tmp_path / "toy"
    run(capsys, "toygen", "--n", "1", "--family", "table", "--out", str(data))
    out = tmp_path / "asm"
    code, stdout, _ = run(capsys, "assemble", "--record", str(data / "table_00000"),
                          "--inject-target", "--tokens", "96", "--dense", "512",
                          "--out", str(out))
    assert code == 0
    assert "assembled 5 parts" in stdout
    for k in range(5):
        assert (out / f"part_{k}.obj").exists()
    assert (out / "generated.anc").exists()
    assert (out / "input.anc").exists()
    with open(out / "poses.json") as fh:
        poses = json.load(fh)
    assert len(poses) == 5
    assert all(p["rmse"] < 1e-6 for p in poses)


# ------------------------------------------------------- train/sample/eval

def test_train_sample_eval_pipeline(tmp_path, capsys):
    data = tmp_path / "toy"
    code, _, _ = run(capsys, "toygen", "--n", "10", "--family", "lamp",
                     "--out", str(data))
    assert code == 0
    model_dir = tmp_path / "model"
    code, stdout, _ = run(capsys, "train", "--data", str(data),
                          "--phases", "16:4", "--dense", "256", "--batch", "2",
                          "--checkpoint-every", "2", "--out", str(model_dir))
    assert code == 0
    report = json.loads(stdout.splitlines()[-1])
    assert report["steps"] == 4
    assert (model_dir / "model.ckpt").exists()
    assert (model_dir / "loss.csv").exists()

    pred = tmp_path / "pred"
    code, stdout, _ = run(capsys, "sample", "--model", str(model_dir),
                          "--data", str(data), "--split", "test",
                          "--tokens", "32", "--dense", "256", "--steps", "2",
                          "--out", str(pred))
    assert code == 0
    assert "sampled 1 objects" in stdout

    code, stdout, _ = run(capsys, "eval", "--pred", str(pred), "--gt", str(data),
                          "--split", "test", "--out", str(tmp_path / "rep"))
    assert code == 0
    assert re.search(r"SCD [\d.]+ +PA [\d.]+ +CA [\d.]+ +SR [\d.]+", stdout)
    assert (tmp_path / "rep" / "report.json").exists()


# ---------------------------------------------------------------------- plot

def test_plot_loss_two_rows(tmp_path, capsys):
    csv_path = tmp_path / "loss.csv"
    csv_path.write_text("step,phase,loss,lr,wallclock\n1,0,0.5,1e-3,0.1\n2,0,0.25,1e-3,0.2\n")
    out = tmp_path / "plots"
    code, stdout, _ = run(capsys, "plot", "--loss", str(csv_path), "--out", str(out))
    assert code == 0
    svg = (out / "loss.svg").read_text()
    assert svg.count("<polyline") == 1
    pts = re.search(r'points="([^"]+)"', svg).group(1)
    assert len(pts.split()) == 2


def test_plot_anchors_three_part_legend(tmp_path, capsys, rng):
    from assembler.anchors import AnchorSet, save_anchors
    pts = rng.normal(size=(9, 3))
    anc = AnchorSet(pts, [(0, 3), (3, 3), (6, 3)], [0] * 3 + [1] * 3 + [2] * 3)
    path = tmp_path / "a.anc"
    save_anchors(anc, path)
    out = tmp_path / "plots"
    code, _, _ = run(capsys, "plot", "--anchors", str(path), "--out", str(out))
    assert code == 0
    svg = (out / "a.svg").read_text()
    used = {c for c in PALETTE[:3] if c in svg}
    assert len(used) == 3
    assert svg.count("part ") == 3


def test_plot_byte_identical_rerun(tmp_path, capsys):
    csv_path = tmp_path / "loss.csv"
    csv_path.write_text("step,phase,loss,lr,wallclock\n1,0,0.9,1e-3,0.1\n5,0,0.1,1e-3,0.4\n")
    outs = []
    for name in ("p1", "p2"):
        out = tmp_path / name
        code, _, _ = run(capsys, "plot", "--loss", str(csv_path), "--out", str(out))
        assert code == 0
        outs.append((out / "loss.svg").read_bytes())
    assert outs[0] == outs[1]


def test_plot_malformed_csv(tmp_path, capsys):
    csv_path = tmp_path / "bad.csv"
    csv_path.write_text("step,loss\n1,not_a_number\n")
    code, _, err = run(capsys, "plot", "--loss", str(csv_path),
                       "--out", str(tmp_path / "p"))
    assert code == 2


def test_plot_requires_input(tmp_path, capsys):
    code, _, err = run(capsys, "plot", "--out", str(tmp_path / "p"))
    assert code == 1
