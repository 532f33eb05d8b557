"""Dataset synthesis: filter, segment, merge, group, augment, persist.

Turns directories of OBJ meshes into assembly records (parts in
ground-truth pose plus randomized initial poses) via connected-component
segmentation, small-part merging, nearest-centroid grouping at several
target-count levels, and random SE(3) augmentation.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .geometry import (RigidTransform, TriangleMesh, _philox, connected_components,
                       load_obj, save_obj, surface_area)

log = logging.getLogger(__name__)

DEFAULT_GROUPING_LEVELS = [(3, 20), (8, 50), (10, 100)]
DEFAULT_KEYWORD_BLOCKLIST = ["scene", "building", "construction", "area",
                             "village", "ruined", "house", "rooms"]


@dataclass
class CurationConfig:
    dominant_area_ratio: float = 0.98
    grouping_levels: list = field(default_factory=lambda: list(DEFAULT_GROUPING_LEVELS))
    min_component_faces: int = 4
    keyword_blocklist: list = field(default_factory=lambda: list(DEFAULT_KEYWORD_BLOCKLIST))
    seed: int = 0
    full_rotation: bool = True
    trans_range: float = 0.4

    def __post_init__(self):
        if not 0.0 < self.dominant_area_ratio < 1.0:
            raise ValueError("dominant_area_ratio must be in (0, 1)")
        for lo, hi in self.grouping_levels:
            if not (3 <= lo <= hi <= 100):
                raise ValueError(f"grouping level ({lo}, {hi}) outside [3, 100]")


@dataclass
class AssemblyRecord:
    """One object: parts in ground-truth pose plus augmented initial poses."""

    object_id: str
    parts: list
    initial_poses: list
    areas: list
    source: str = "unknown"

    def validate(self) -> None:
        n = len(self.parts)
        if not (n == len(self.initial_poses) == len(self.areas)) or n < 2:
            raise ValueError("record needs >= 2 parts with matching poses and areas")
        for part, area in zip(self.parts, self.areas):
            got = surface_area(part)
            if abs(got - area) > 1e-6 * max(1.0, abs(area)):
                raise ValueError(f"stored area {area} != mesh area {got}")
        for pose in self.initial_poses:
            pose.validate()

    def initial_parts(self) -> list:
        """Parts moved into their augmented start poses."""
        return [p.transformed(t) for p, t in zip(self.parts, self.initial_poses)]


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)  # dicts: object_id, path, part_count, source
    counts_by_source: dict = field(default_factory=dict)

    def add(self, object_id: str, path: str, part_count: int, source: str) -> None:
        if any(r["object_id"] == object_id for r in self.records):
            raise ValueError(f"duplicate object_id {object_id}")
        self.records.append({"object_id": object_id, "path": path,
                             "part_count": part_count, "source": source})
        self.counts_by_source[source] = self.counts_by_source.get(source, 0) + 1


@dataclass(frozen=True)
class FilterDecision:
    accepted: bool
    reason: str | None = None


def filter_mesh(mesh: TriangleMesh, cfg: CurationConfig) -> FilterDecision:
    """Reject single-component meshes and meshes with one dominant part."""
    comps = connected_components(mesh)
    if len(comps) < 2:
        return FilterDecision(False, "single_part")
    areas = [surface_area(c) for c in comps]
    total = sum(areas)
    if total > 0 and max(areas) / total > cfg.dominant_area_ratio:
        return FilterDecision(False, "dominant_part")
    return FilterDecision(True)


def caption_blocked(caption: str, blocklist: list) -> str | None:
    words = caption.lower()
    for kw in blocklist:
        if kw in words:
            return kw
    return None


def part_centroid(part: TriangleMesh) -> np.ndarray:
    return part.vertices.mean(axis=0)


def _merge_meshes(a: TriangleMesh, b: TriangleMesh) -> TriangleMesh:
    return TriangleMesh(np.concatenate([a.vertices, b.vertices]),
                        np.concatenate([a.faces, b.faces + len(a.vertices)]))


def merge_small_parts(parts: list, min_faces: int) -> list:
    """Merge every part with fewer than min_faces faces into its nearest neighbor.

    Repeats until no undersized part remains or a single part is left.
    Total face count is conserved.
    """
    parts = list(parts)
    while len(parts) > 1:
        small = [i for i, p in enumerate(parts) if len(p.faces) < min_faces]
        if not small:
            break
        i = min(small, key=lambda idx: (len(parts[idx].faces), idx))
        ci = part_centroid(parts[i])
        others = [(float(np.linalg.norm(part_centroid(p) - ci)), j)
                  for j, p in enumerate(parts) if j != i]
        _, j = min(others)
        keep, drop = (j, i) if j < i else (i, j)
        merged = _merge_meshes(parts[keep], parts[drop])
        parts = [merged if k == keep else p for k, p in enumerate(parts) if k != drop]
    return parts


def group_parts_knn(parts: list, target: int, seed: int = 0) -> list:
    """Agglomerative nearest-centroid merging down to exactly `target` parts.

    Ties broken by lowest part-index pair, so the result is deterministic.
    """
    if target < 1:
        raise ValueError("target must be >= 1")
    parts = list(parts)
    while len(parts) > target:
        cents = np.stack([part_centroid(p) for p in parts])
        diff = cents[:, None, :] - cents[None, :, :]
        d2 = (diff ** 2).sum(axis=2)
        n = len(parts)
        iu = np.triu_indices(n, k=1)
        best = int(np.argmin(d2[iu]))
        i, j = int(iu[0][best]), int(iu[1][best])
        merged = _merge_meshes(parts[i], parts[j])
        parts = [merged if k == i else p for k, p in enumerate(parts) if k != j]
    return parts


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform SO(3) sample via a normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def augment_record(parts: list, seed: int, rot: bool = True,
                   trans_range: float = 0.4) -> list:
    """One random start pose per part, deterministic per (seed, part index)."""
    if trans_range < 0:
        raise ValueError("trans_range must be >= 0")
    poses = []
    for i in range(len(parts)):
        rng = _philox(seed, i)
        rotation = random_rotation(rng) if rot else np.eye(3)
        translation = rng.uniform(-trans_range, trans_range, size=3)
        poses.append(RigidTransform(rotation, translation))
    return poses


# ---------------------------------------------------------------------------
# On-disk record format


def _round9(x: float) -> float:
    return float(f"{float(x):.9g}")


def _json_ready(obj):
    if isinstance(obj, float):
        return _round9(obj)
    if isinstance(obj, (np.floating,)):
        return _round9(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _json_ready(obj.tolist())
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    return obj


def write_json_atomic(obj, path) -> None:
    path = str(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(_json_ready(obj), fh, indent=1, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_record(record: AssemblyRecord, record_dir) -> None:
    record.validate()
    os.makedirs(record_dir, exist_ok=True)
    for k, part in enumerate(record.parts):
        tmp = os.path.join(record_dir, f".part_{k}.obj.tmp")
        save_obj(part, tmp)
        os.replace(tmp, os.path.join(record_dir, f"part_{k}.obj"))
    poses = [{"rotation": [_round9(v) for v in t.rotation.reshape(-1)],
              "translation": [_round9(v) for v in t.translation]}
             for t in record.initial_poses]
    write_json_atomic(poses, os.path.join(record_dir, "poses.json"))
    write_json_atomic({"object_id": record.object_id, "source": record.source,
                       "areas": list(record.areas)},
                      os.path.join(record_dir, "meta.json"))


def read_record(record_dir) -> AssemblyRecord:
    with open(os.path.join(record_dir, "meta.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    with open(os.path.join(record_dir, "poses.json"), encoding="utf-8") as fh:
        poses_raw = json.load(fh)
    parts = []
    for k in range(len(poses_raw)):
        parts.append(load_obj(os.path.join(record_dir, f"part_{k}.obj")))
    poses = [RigidTransform(np.array(p["rotation"]).reshape(3, 3),
                            np.array(p["translation"])) for p in poses_raw]
    record = AssemblyRecord(meta["object_id"], parts, poses, meta["areas"],
                            meta.get("source", "unknown"))
    record.validate()
    return record


def write_manifest(manifest: DatasetManifest, out_dir) -> None:
    write_json_atomic({"records": manifest.records,
                       "counts_by_source": manifest.counts_by_source},
                      os.path.join(out_dir, "manifest.json"))


def read_manifest(dataset_dir) -> DatasetManifest:
    with open(os.path.join(dataset_dir, "manifest.json"), encoding="utf-8") as fh:
        raw = json.load(fh)
    return DatasetManifest(raw["records"], raw["counts_by_source"])


# ---------------------------------------------------------------------------
# Pipeline


def build_dataset(in_dir, out_dir, cfg: CurationConfig) -> DatasetManifest:
    """filter -> segment -> merge -> group (per level) -> augment -> persist."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = DatasetManifest()
    names = sorted(n for n in os.listdir(in_dir) if n.lower().endswith(".obj"))
    for mesh_idx, name in enumerate(names):
        stem = os.path.splitext(name)[0]
        caption_path = os.path.join(in_dir, stem + ".caption.txt")
        if os.path.exists(caption_path):
            with open(caption_path, encoding="utf-8") as fh:
                kw = caption_blocked(fh.read(), cfg.keyword_blocklist)
            if kw:
                log.info("reject %s: caption keyword %r", name, kw)
                continue
        try:
            mesh = load_obj(os.path.join(in_dir, name))
        except Exception as exc:
            log.warning("skipping unreadable mesh %s: %s", name, exc)
            continue
        decision = filter_mesh(mesh, cfg)
        if not decision.accepted:
            log.info("reject %s: %s", name, decision.reason)
            continue
        comps = merge_small_parts(connected_components(mesh), cfg.min_component_faces)
        if len(comps) < 3:
            log.info("reject %s: fewer than 3 parts after merging", name)
            continue
        for level, (lo, hi) in enumerate(cfg.grouping_levels):
            rng = _philox(cfg.seed, mesh_idx * 1000 + level)
            target = int(rng.integers(lo, hi + 1))
            parts = group_parts_knn(comps, min(target, len(comps)))
            if len(parts) < 3:
                continue
            object_id = f"{stem}_L{level}"
            poses = augment_record(parts, seed=cfg.seed + mesh_idx * 1000 + level,
                                   rot=cfg.full_rotation, trans_range=cfg.trans_range)
            record = AssemblyRecord(object_id, parts, poses,
                                    [surface_area(p) for p in parts], source="curated")
            rel = object_id
            write_record(record, os.path.join(out_dir, rel))
            manifest.add(object_id, rel, len(parts), record.source)
    if not manifest.records:
        raise RuntimeError("no records produced")
    write_manifest(manifest, out_dir)
    return manifest


def dataset_stats(manifest: DatasetManifest) -> dict:
    counts = [r["part_count"] for r in manifest.records]
    hist: dict[int, int] = {}
    for c in counts:
        hist[c] = hist.get(c, 0) + 1
    return {
        "total_records": len(manifest.records),
        "by_source": dict(manifest.counts_by_source),
        "part_count": {
            "min": int(min(counts)) if counts else 0,
            "median": float(np.median(counts)) if counts else 0,
            "max": int(max(counts)) if counts else 0,
            "hist": hist,
        },
    }
