"""Assembly evaluation: shape chamfer, part accuracy, connectivity, success.

All metrics operate in the object-normalized ground-truth frame with a
fixed sampling seed, so reports are deterministic. Chamfer is the
symmetric mean of squared nearest-neighbor distances; the shape chamfer
is reported x1000 following the benchmark convention.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .curation import read_manifest, read_record, write_json_atomic
from .fitting import umeyama_fit
from .geometry import load_obj, normalize_object, sample_surface, surface_area

PA_THRESHOLD = 0.01  # squared-chamfer threshold for a correctly placed part
CONTACT_TAU = 0.01  # adjacency / connection distance threshold
SCD_SCALE = 1000.0
OBJECT_SAMPLES = 4096
PART_SAMPLES = 1024
EVAL_SEED = 7


@dataclass
class EvalReport:
    scd: float
    pa: float
    ca: float
    sr: float
    per_object: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"scd": self.scd, "pa": self.pa, "ca": self.ca, "sr": self.sr,
                "objects": self.per_object}


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean squared nearest-neighbor distance."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer requires nonempty clouds")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float((d_ab ** 2).mean() + (d_ba ** 2).mean())


def _allocate_samples(areas, total):
    areas = np.asarray(areas, dtype=np.float64)
    quota = areas / areas.sum() * total
    counts = np.floor(quota).astype(int)
    short = total - counts.sum()
    order = np.lexsort((np.arange(len(areas)), -(quota - counts)))
    counts[order[:short]] += 1
    return np.maximum(counts, 1)


def sample_object(parts: list, total: int, seed: int) -> np.ndarray:
    """Area-weighted surface samples across a list of part meshes."""
    counts = _allocate_samples([max(surface_area(p), 1e-12) for p in parts], total)
    return np.concatenate([sample_surface(p, int(c), seed + i)
                           for i, (p, c) in enumerate(zip(parts, counts))], axis=0)


def shape_chamfer(assembled: list, gt: list, samples: int = OBJECT_SAMPLES,
                  seed: int = EVAL_SEED) -> float:
    """Chamfer between whole-object clouds, reported x1000."""
    if len(assembled) != len(gt):
        raise ValueError("part count mismatch")
    a = sample_object(assembled, samples, seed)
    b = sample_object(gt, samples, seed)
    return SCD_SCALE * chamfer(a, b)


def part_relative_transforms(assembled: list, gt: list):
    """Per-part rigid transform taking each ground-truth mesh to its
    assembled counterpart, recovered from corresponded vertices."""
    fits = []
    for am, gm in zip(assembled, gt):
        if am.vertices.shape != gm.vertices.shape:
            raise ValueError("assembled part does not correspond to ground truth")
        fits.append(umeyama_fit(gm.vertices, am.vertices))
    return fits


def part_accuracy(assembled: list, gt: list, threshold: float = PA_THRESHOLD,
                  seed: int = EVAL_SEED) -> tuple[float, list]:
    """Percent of parts with sampled-cloud chamfer strictly below threshold."""
    if len(assembled) != len(gt):
        raise ValueError("part count mismatch")
    fits = part_relative_transforms(assembled, gt)
    flags = []
    for i, (gm, fit) in enumerate(zip(gt, fits)):
        cloud_gt = sample_surface(gm, PART_SAMPLES, seed + i)
        if fit.rmse < 1e-6:
            cloud_as = fit.transform.apply(cloud_gt)
        else:
            cloud_as = sample_surface(assembled[i], PART_SAMPLES, seed + i)
        flags.append(bool(chamfer(cloud_as, cloud_gt) < threshold))
    return 100.0 * np.mean(flags), flags


def gt_adjacency(gt: list, tau: float = CONTACT_TAU, seed: int = EVAL_SEED):
    """Adjacent part pairs and their mutually nearest contact sample points."""
    clouds = [sample_surface(p, PART_SAMPLES, seed + i) for i, p in enumerate(gt)]
    pairs = []
    for i in range(len(gt)):
        tree_i = cKDTree(clouds[i])
        for j in range(i + 1, len(gt)):
            d, idx = tree_i.query(clouds[j])
            kmin = int(np.argmin(d))
            if d[kmin] < tau:
                pairs.append((i, j, clouds[i][idx[kmin]], clouds[j][kmin]))
    return pairs


def connectivity_accuracy(assembled: list, gt: list, tau: float = CONTACT_TAU,
                          seed: int = EVAL_SEED) -> float:
    """Percent of ground-truth contacts preserved by the recovered poses.

    For each adjacent ground-truth pair the mutually nearest contact
    points are mapped through the parts' recovered relative transforms;
    the connection counts as correct when the mapped points stay within
    tau. Objects with no adjacent pair score 100.
    """
    pairs = gt_adjacency(gt, tau, seed)
    if not pairs:
        return 100.0
    fits = part_relative_transforms(assembled, gt)
    correct = 0
    for i, j, ci, cj in pairs:
        mi = fits[i].transform.apply(ci[None])[0]
        mj = fits[j].transform.apply(cj[None])[0]
        if np.linalg.norm(mi - mj) < tau:
            correct += 1
    return 100.0 * correct / len(pairs)


def success_rate(per_object_flags: list) -> float:
    """Percent of objects where every part meets the PA threshold."""
    if not per_object_flags:
        return 0.0
    return 100.0 * np.mean([all(flags) for flags in per_object_flags])


def evaluate_object(assembled: list, gt: list, seed: int = EVAL_SEED) -> dict:
    pa, flags = part_accuracy(assembled, gt, seed=seed)
    return {
        "scd": shape_chamfer(assembled, gt, seed=seed),
        "pa": pa,
        "ca": connectivity_accuracy(assembled, gt, seed=seed),
        "part_flags": flags,
    }


def aggregate(per_object: list) -> EvalReport:
    all_flags = [o["part_flags"] for o in per_object]
    total_parts = sum(len(f) for f in all_flags)
    pa = 100.0 * sum(sum(f) for f in all_flags) / total_parts if total_parts else 0.0
    return EvalReport(
        scd=float(np.mean([o["scd"] for o in per_object])) if per_object else 0.0,
        pa=pa,
        ca=float(np.mean([o["ca"] for o in per_object])) if per_object else 0.0,
        sr=success_rate(all_flags),
        per_object=per_object,
    )


def _normalized_gt_parts(record) -> list:
    scale, offset = normalize_object(record.parts)
    out = []
    for p in record.parts:
        q = p.copy()
        q.vertices = (q.vertices + offset) * scale
        out.append(q)
    return out


def load_prediction(pred_dir, object_id: str, n_parts: int) -> list:
    d = os.path.join(pred_dir, object_id)
    parts = []
    for k in range(n_parts):
        path = os.path.join(d, f"part_{k}.obj")
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing prediction part {path}")
        parts.append(load_obj(path))
    return parts


def evaluate_dataset(pred_dir, dataset_dir, seed: int = EVAL_SEED,
                     out_dir=None, split: str | None = None) -> EvalReport:
    """Score every predicted object against its dataset record.

    Predictions are per-object directories of part_<k>.obj meshes in the
    normalized ground-truth frame. Raises when ids do not match.
    """
    manifest = read_manifest(dataset_dir)
    wanted = {r["object_id"]: r["path"] for r in manifest.records}
    if split is not None:
        import json
        with open(os.path.join(dataset_dir, "split.json"), encoding="utf-8") as fh:
            keep = set(json.load(fh)[split])
        wanted = {k: v for k, v in wanted.items() if k in keep}
    have = {d for d in os.listdir(pred_dir)
            if os.path.isdir(os.path.join(pred_dir, d))} if os.path.isdir(pred_dir) else set()
    if not have:
        raise FileNotFoundError(f"no predictions found in {pred_dir}")
    missing = sorted(set(wanted) - have)
    if missing:
        raise ValueError(f"predictions missing for ids: {', '.join(missing)}")
    per_object = []
    for object_id in sorted(wanted):
        record = read_record(os.path.join(dataset_dir, wanted[object_id]))
        gt = _normalized_gt_parts(record)
        assembled = load_prediction(pred_dir, object_id, len(gt))
        row = evaluate_object(assembled, gt, seed=seed)
        row["object_id"] = object_id
        per_object.append(row)
    report = aggregate(per_object)
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_report(report: EvalReport, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_json_atomic(report.as_dict(), os.path.join(out_dir, "report.json"))
    tmp = os.path.join(out_dir, ".report.csv.tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["object_id", "scd", "pa", "ca"])
        for row in report.per_object:
            writer.writerow([row.get("object_id", ""), f"{row['scd']:.9g}",
                             f"{row['pa']:.9g}", f"{row['ca']:.9g}"])
        writer.writerow(["ALL", f"{report.scd:.9g}", f"{report.pa:.9g}",
                         f"{report.ca:.9g}"])
    os.replace(tmp, os.path.join(out_dir, "report.csv"))
