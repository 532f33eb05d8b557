"""Acceptance suite: the end-to-end guarantees of the package.

Criterion 7 trains two DiT-tiny models (main and the part-cross-attention
ablation) from scratch on procedural data; on a single CPU core this is
the dominant cost of the suite (around an hour). Its recipe constants
live in `RECIPE` below.
"""

import json
import os
import re
import time

import numpy as np
import pytest

from assembler.anchors import AnchorSet, build_anchor_pair
from assembler.cli import dispatch
from assembler.curation import (CurationConfig, filter_mesh, group_parts_knn,
                                merge_small_parts)
from assembler.diffusion import (SamplerConfig, TrainConfig,
                                 assemble_end_to_end, load_dataset_records,
                                 make_schedule, q_sample, sample, train)
from assembler.fitting import fit_all_parts, umeyama_fit
from assembler.geometry import TriangleMesh, connected_components
from assembler.metrics import (_normalized_gt_parts, aggregate,
                               evaluate_dataset, evaluate_object)
from assembler.model import Denoiser, dit_tiny
from assembler.numerics import Tensor, masked_attention
from assembler.toygen import ToySpec, generate_toy, generate_toy_dataset_multi

from conftest import make_box, random_rotation_matrix


def geodesic_angle(r_a, r_b):
    cos = (np.trace(r_a.T @ r_b) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


# --------------------------------------------------------------- criterion 1

def test_criterion_1_rigid_fit_oracle():
    rng = np.random.default_rng(101)
    t0 = time.time()
    worst_rot, worst_trans = 0.0, 0.0
    for _ in range(1000):
        n = int(rng.integers(4, 60))
        src = rng.normal(size=(n, 3)) * rng.uniform(0.1, 5.0)
        rot = random_rotation_matrix(rng)
        t = rng.normal(size=3) * 10.0
        fit = umeyama_fit(src, src @ rot.T + t)
        worst_rot = max(worst_rot, geodesic_angle(fit.transform.rotation, rot))
        worst_trans = max(worst_trans,
                          float(np.abs(fit.transform.translation - t).max()))
    elapsed = time.time() - t0
    assert worst_rot < 1e-6
    assert worst_trans < 1e-8
    assert elapsed < 5.0


# --------------------------------------------------------------- criterion 2

def test_criterion_2_gradient_suite(capsys):
    t0 = time.time()
    code = dispatch(["gradcheck", "--seed", "0"])
    elapsed = time.time() - t0
    out = capsys.readouterr().out
    assert code == 0
    overall = float(re.search(r"OVERALL\s+max relative error ([0-9.e+-]+)", out).group(1))
    assert overall < 1e-4
    assert elapsed < 120.0


# --------------------------------------------------------------- criterion 3

def test_criterion_3_mask_semantics():
    rng = np.random.default_rng(103)
    for n_parts in (2, 7, 16, 32):
        lengths = rng.integers(2, 6, size=n_parts)
        spans, cursor = [], 0
        for l in lengths:
            spans.append((cursor, int(l)))
            cursor += int(l)
        n, width, heads = cursor, 64, 4
        q, k, v = (rng.normal(size=(n, width)).astype(np.float32) for _ in range(3))
        mask = np.zeros((n, n), bool)
        for s, l in spans:
            mask[s:s + l, s:s + l] = True
        full = masked_attention(Tensor(q), Tensor(k), Tensor(v), mask, heads).data
        for s, l in spans:
            sub = masked_attention(Tensor(q[s:s + l]), Tensor(k[s:s + l]),
                                   Tensor(v[s:s + l]), np.ones((l, l), bool),
                                   heads).data
            assert np.abs(full[s:s + l] - sub).max() < 1e-6


# --------------------------------------------------------------- criterion 4

def test_criterion_4_representation_round_trip():
    families = ("table", "chair", "lamp", "stack")
    worst = 0.0
    for i in range(100):
        spec = ToySpec(family=families[i % 4], seed=104)
        record = generate_toy(spec, i)
        inp, tgt, _ = build_anchor_pair(record, total=128, dense_count=512, seed=i)
        fits = fit_all_parts(inp, tgt)
        worst = max(worst, max(f.rmse for f in fits))
    assert worst < 1e-9


# --------------------------------------------------------------- criterion 5

def test_criterion_5_forward_process_statistics():
    rng = np.random.default_rng(105)
    schedule = make_schedule("linear", 1000)
    x0 = rng.normal(size=(8, 3))
    dim = x0.size
    n = 10_000
    for t in (0, 499, 999):  # t = 1, T/2, T (1-based)
        ab = schedule.alphas_bar[t]
        eps = rng.normal(size=(n,) + x0.shape)
        sq = (q_sample(x0[None], np.full(n, t), eps, schedule) ** 2).sum(axis=(1, 2))
        expect = ab * (x0 ** 2).sum() + (1 - ab) * dim
        b2 = 1 - ab
        var = (2 * b2 ** 2 + 4 * b2 * ab * x0.reshape(-1) ** 2).sum()
        assert abs(sq.mean() - expect) < 5 * np.sqrt(var / n)


# --------------------------------------------------------------- criterion 6

def test_criterion_6_analytic_sampler_oracle():
    rng = np.random.default_rng(106)
    schedule = make_schedule("linear", 1000)
    spans = [(0, 8), (8, 8)]
    ids = np.repeat([0, 1], 8)
    anchors = AnchorSet(rng.normal(size=(16, 3)), spans, ids)
    x0 = rng.normal(size=(16, 3)) * 0.3

    def oracle(x_t, t):
        ab = schedule.alphas_bar[t]
        return (x_t - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)

    out = sample(None, anchors, None, None,
                 SamplerConfig(kind="ddim", steps=50, seed=6), schedule,
                 denoise_fn=oracle)
    assert np.abs(out.points - x0).max() < 1e-3


# --------------------------------------------------------------- criterion 8

def _face_multiset(mesh):
    corners = np.round(mesh.vertices[mesh.faces], 6)
    return sorted(tuple(sorted(map(tuple, tri))) for tri in corners)


def _corpus_mesh(rng, dominant):
    """Multi-box mesh; `dominant` pushes one part above the 0.98 area ratio."""
    if dominant:
        boxes = [make_box((0, 0, 0), (10, 10, 10))]
        boxes += [make_box((20 + 3 * i, 0, 0), (0.2, 0.2, 0.2)) for i in range(2)]
    else:
        n = int(rng.integers(3, 8))
        boxes = [make_box((4.0 * i, 0, 0), tuple(rng.uniform(0.5, 2.0, 3)))
                 for i in range(n)]
    verts = np.concatenate([b.vertices for b in boxes])
    faces = np.concatenate([b.faces + 8 * i for i, b in enumerate(boxes)])
    return TriangleMesh(verts, faces)


def test_criterion_8_curation_conservation():
    rng = np.random.default_rng(108)
    cfg = CurationConfig()
    dominant_idx = {i for i in range(50) if i % 5 == 0}
    rejected = set()
    for i in range(50):
        mesh = _corpus_mesh(rng, dominant=i in dominant_idx)
        decision = filter_mesh(mesh, cfg)
        if not decision.accepted:
            assert decision.reason == "dominant_part"
            rejected.add(i)
            continue
        parts = connected_components(mesh)
        merged = merge_small_parts(parts, cfg.min_component_faces)
        grouped = group_parts_knn(merged, max(3, len(merged) - 1))
        before = _face_multiset(mesh)
        after = sorted(sum((_face_multiset(p) for p in grouped), []))
        assert after == before
    assert rejected == dominant_idx


# --------------------------------------------------------------- criterion 9

def test_criterion_9_metric_self_consistency(toy_dataset, tmp_path):
    from assembler.curation import read_record
    from assembler.geometry import save_obj
    dataset_dir, manifest = toy_dataset
    pred = tmp_path / "pred"
    for entry in manifest.records:
        rec = read_record(os.path.join(dataset_dir, entry["path"]))
        d = pred / entry["object_id"]
        d.mkdir(parents=True)
        for k, part in enumerate(_normalized_gt_parts(rec)):
            save_obj(part, d / f"part_{k}.obj")
    report = evaluate_dataset(pred, dataset_dir)
    assert report.pa == 100.0
    assert report.ca == 100.0
    assert report.sr == 100.0
    assert report.scd < 1e-3
    assert report.sr <= report.pa + 1e-9

    # SR <= PA on corrupted corpora too
    rng = np.random.default_rng(109)
    for trial in range(5):
        rows = []
        for entry in manifest.records[:8]:
            rec = read_record(os.path.join(dataset_dir, entry["path"]))
            gt = _normalized_gt_parts(rec)
            moved = []
            for p in gt:
                q = p.copy()
                if rng.random() < 0.4:
                    q.vertices = q.vertices + rng.normal(size=3) * 0.2
                moved.append(q)
            rows.append(evaluate_object(moved, gt))
        agg = aggregate(rows)
        assert agg.sr <= agg.pa + 1e-9


# -------------------------------------------------------------- criterion 10

def _tree_bytes(root, skip=("run.log", "effective-config.json", "loss.csv")):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            if name in skip:
                continue
            path = os.path.join(dirpath, name)
            out[os.path.relpath(path, root)] = open(path, "rb").read()
    return out


def test_criterion_10_determinism(tmp_path, capsys):
    # two end-to-end runs with the same seeds; every artifact byte-identical
    # (run.log and loss.csv carry wallclock, effective-config carries paths)
    trees = []
    for run_name in ("r1", "r2"):
        root = tmp_path / run_name
        data, model, pred, rep = (str(root / d) for d in
                                  ("data", "model", "pred", "rep"))
        assert dispatch(["toygen", "--n", "10", "--family", "table,chair",
                         "--seed", "3", "--out", data]) == 0
        assert dispatch(["train", "--data", data, "--phases", "24:6",
                         "--dense", "256", "--batch", "2",
                         "--checkpoint-every", "3", "--seed", "3",
                         "--out", model]) == 0
        assert dispatch(["sample", "--model", model, "--data", data,
                         "--split", "test", "--tokens", "32", "--dense", "256",
                         "--steps", "3", "--seed", "3", "--out", pred]) == 0
        assert dispatch(["eval", "--pred", pred, "--gt", data,
                         "--split", "test", "--out", rep]) == 0
        capsys.readouterr()
        trees.append(_tree_bytes(root))
    assert trees[0].keys() == trees[1].keys()
    different = [k for k in trees[0] if trees[0][k] != trees[1][k]]
    assert different == []


# --------------------------------------------------------------- criterion 7

RECIPE = {
    "n_objects": 2500,          # index split: 2000 train / 250 val / 250 test
    "jitter": 0.15,
    "phases": [(64, 1024, 1200), (256, 1024, 200)],
    "batch": 4,
    "lr": 3e-4,
    "eval_tokens": 256,
    "eval_dense": 1024,
    "sampler_steps": 10,
    "held_out": 100,
    "ablation_held_out": 25,
    "seed": 7,
}


@pytest.fixture(scope="module")
def desk_scale_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    data = root / "data"
    specs = [ToySpec(family="table", seed=RECIPE["seed"],
                     size_jitter=RECIPE["jitter"]),
             ToySpec(family="chair", seed=RECIPE["seed"],
                     size_jitter=RECIPE["jitter"])]
    generate_toy_dataset_multi(specs, RECIPE["n_objects"], data)
    records = load_dataset_records(data, "train")
    held_out = load_dataset_records(data, "test")

    def fit_model(ablation):
        model = Denoiser(dit_tiny(part_cross_attention=ablation),
                         seed=RECIPE["seed"])
        cfg = TrainConfig(batch_size=RECIPE["batch"], lr=RECIPE["lr"],
                          seed=RECIPE["seed"], phases=RECIPE["phases"],
                          checkpoint_every=10_000, log_every=50)
        out = root / ("ablation" if ablation else "main")
        train(records, model, cfg, out)
        return model

    return {"data": data, "held_out": held_out, "fit_model": fit_model,
            "schedule": make_schedule()}


def _score(model, records, base_seed):
    rows = []
    schedule = make_schedule()
    for i, rec in enumerate(records):
        sampler = SamplerConfig(kind="ddim", steps=RECIPE["sampler_steps"],
                                cfg_scale=1.0, seed=base_seed + i)
        res = assemble_end_to_end(rec, model, sampler, schedule,
                                  total=RECIPE["eval_tokens"],
                                  dense_count=RECIPE["eval_dense"],
                                  seed=RECIPE["seed"])
        rows.append(evaluate_object(res.assembled_parts, res.gt_parts))
    return aggregate(rows)


def test_criterion_7_desk_scale_end_to_end(desk_scale_run):
    held = desk_scale_run["held_out"][:RECIPE["held_out"]]
    main = desk_scale_run["fit_model"](ablation=False)
    report = _score(main, held, base_seed=1000)
    assert report.pa >= 80.0, f"PA {report.pa:.2f}"
    assert report.sr >= 50.0, f"SR {report.sr:.2f}"
    assert report.ca >= 70.0, f"CA {report.ca:.2f}"

    ablation = desk_scale_run["fit_model"](ablation=True)
    subset = held[:RECIPE["ablation_held_out"]]
    pa_main = _score(main, subset, base_seed=1000).pa
    pa_ablation = _score(ablation, subset, base_seed=1000).pa
    assert pa_ablation < pa_main, (
        f"ablation PA {pa_ablation:.2f} not worse than main {pa_main:.2f}")
