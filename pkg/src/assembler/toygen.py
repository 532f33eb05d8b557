"""Procedural toy assemblies: tables, chairs, lamps, stacked primitives.

Fully parameterized box/cylinder constructions with exact ground truth,
repeated congruent parts (table/chair legs), and randomized start poses.
Records use the same on-disk format as the curation pipeline.

Family constants (object units, y up, jitter 0):
  table: top 0.9 x 0.08 x 0.7 on four 0.07-square legs, total height 0.7
  chair: seat 0.45 x 0.06 x 0.45 at 0.42, four legs, backrest above the seat
  lamp:  base disc r 0.18, pole r 0.025 x 0.5, shade r 0.15 x 0.18
  stack: part_count_range boxes stacked face to face with shrinking width
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .curation import (AssemblyRecord, DatasetManifest, augment_record,
                       write_json_atomic, write_manifest, write_record)
from .geometry import TriangleMesh, _philox, surface_area

FAMILIES = ("table", "chair", "lamp", "stack")


@dataclass(frozen=True)
class ToySpec:
    family: str = "table"
    part_count_range: tuple = (2, 32)
    size_jitter: float = 0.15
    seed: int = 0
    trans_range: float = 0.4
    full_rotation: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        lo, hi = self.part_count_range
        if not 2 <= lo <= hi <= 32:
            raise ValueError("part_count_range must satisfy 2 <= min <= max <= 32")


def box_mesh(center, size) -> TriangleMesh:
    cx, cy, cz = center
    hx, hy, hz = np.asarray(size, dtype=np.float64) / 2.0
    corners = np.array([[sx, sy, sz] for sx in (-hx, hx)
                        for sy in (-hy, hy) for sz in (-hz, hz)])
    verts = corners + np.array([cx, cy, cz])
    faces = np.array([
        [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],
        [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],
        [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3],
    ], dtype=np.int64)
    return TriangleMesh(verts, faces)


def cylinder_mesh(center, radius, height, segments: int = 24) -> TriangleMesh:
    cx, cy, cz = center
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), np.zeros(segments), radius * np.sin(ang)], axis=1)
    bottom = ring + np.array([cx, cy - height / 2, cz])
    top = ring + np.array([cx, cy + height / 2, cz])
    verts = np.concatenate([bottom, top,
                            [[cx, cy - height / 2, cz]], [[cx, cy + height / 2, cz]]])
    cb, ct = 2 * segments, 2 * segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces += [[i, j, segments + i], [j, segments + j, segments + i]]
        faces += [[cb, j, i], [ct, segments + i, segments + j]]
    return TriangleMesh(verts, np.array(faces, dtype=np.int64))


def _jit(rng: np.random.Generator, base: float, jitter: float) -> float:
    return base * (1.0 + jitter * rng.uniform(-1.0, 1.0))


def _table_parts(rng, jitter):
    top_w = _jit(rng, 0.9, jitter)
    top_d = _jit(rng, 0.7, jitter)
    top_t = _jit(rng, 0.08, jitter)
    leg_s = _jit(rng, 0.07, jitter)
    leg_h = _jit(rng, 0.62, jitter)
    top = box_mesh((0, leg_h + top_t / 2, 0), (top_w, top_t, top_d))
    inset_x = top_w / 2 - leg_s / 2 - 0.02
    inset_z = top_d / 2 - leg_s / 2 - 0.02
    legs = [box_mesh((sx * inset_x, leg_h / 2, sz * inset_z), (leg_s, leg_h, leg_s))
            for sx in (-1, 1) for sz in (-1, 1)]
    return [top] + legs


def _chair_parts(rng, jitter):
    seat_w = _jit(rng, 0.45, jitter)
    seat_t = _jit(rng, 0.06, jitter)
    leg_s = _jit(rng, 0.05, jitter)
    leg_h = _jit(rng, 0.36, jitter)
    back_h = _jit(rng, 0.45, jitter)
    back_t = _jit(rng, 0.05, jitter)
    seat = box_mesh((0, leg_h + seat_t / 2, 0), (seat_w, seat_t, seat_w))
    inset = seat_w / 2 - leg_s / 2 - 0.015
    legs = [box_mesh((sx * inset, leg_h / 2, sz * inset), (leg_s, leg_h, leg_s))
            for sx in (-1, 1) for sz in (-1, 1)]
    back = box_mesh((0, leg_h + seat_t + back_h / 2, -(seat_w - back_t) / 2),
                    (seat_w, back_h, back_t))
    return [seat] + legs + [back]


def _lamp_parts(rng, jitter):
    base_r = _jit(rng, 0.18, jitter)
    base_h = _jit(rng, 0.04, jitter)
    pole_r = _jit(rng, 0.025, jitter)
    pole_h = _jit(rng, 0.5, jitter)
    shade_r = _jit(rng, 0.15, jitter)
    shade_h = _jit(rng, 0.18, jitter)
    base = cylinder_mesh((0, base_h / 2, 0), base_r, base_h)
    pole = cylinder_mesh((0, base_h + pole_h / 2, 0), pole_r, pole_h)
    shade = cylinder_mesh((0, base_h + pole_h + shade_h / 2, 0), shade_r, shade_h)
    return [base, pole, shade]


def _stack_parts(rng, jitter, count_range):
    lo, hi = count_range
    n = int(rng.integers(lo, hi + 1))
    parts, y = [], 0.0
    for i in range(n):
        shrink = 1.0 - 0.6 * i / max(n - 1, 1)
        w = _jit(rng, 0.6 * shrink, jitter)
        d = _jit(rng, 0.5 * shrink, jitter)
        h = _jit(rng, 0.12, jitter)
        parts.append(box_mesh((0, y + h / 2, 0), (w, h, d)))
        y += h
    return parts


def generate_toy(spec: ToySpec, index: int) -> AssemblyRecord:
    """Deterministic toy record for (spec, index)."""
    rng = _philox(spec.seed, index)
    if spec.family == "table":
        parts = _table_parts(rng, spec.size_jitter)
    elif spec.family == "chair":
        parts = _chair_parts(rng, spec.size_jitter)
    elif spec.family == "lamp":
        parts = _lamp_parts(rng, spec.size_jitter)
    else:
        parts = _stack_parts(rng, spec.size_jitter, spec.part_count_range)
    lo, hi = spec.part_count_range
    if not lo <= len(parts) <= hi:
        raise ValueError(f"{spec.family} produces {len(parts)} parts, "
                         f"outside range {spec.part_count_range}")
    poses = augment_record(parts, seed=spec.seed * 1_000_003 + index,
                           rot=spec.full_rotation, trans_range=spec.trans_range)
    return AssemblyRecord(f"{spec.family}_{index:05d}", parts, poses,
                          [surface_area(p) for p in parts], source="toy")


def split_of_index(index: int) -> str:
    """80/10/10 split by index hash: bucket 8 -> val, 9 -> test."""
    bucket = index % 10
    return "val" if bucket == 8 else "test" if bucket == 9 else "train"


def generate_toy_dataset(spec: ToySpec, n: int, out_dir) -> DatasetManifest:
    return generate_toy_dataset_multi([spec], n, out_dir)


def generate_toy_dataset_multi(specs: list, n: int, out_dir) -> DatasetManifest:
    """n records cycling over the given specs, plus manifest and split files."""
    if n < 1:
        raise ValueError("n must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    manifest = DatasetManifest()
    splits = {"train": [], "val": [], "test": []}
    for index in range(n):
        spec = specs[index % len(specs)]
        record = generate_toy(spec, index)
        write_record(record, os.path.join(out_dir, record.object_id))
        manifest.add(record.object_id, record.object_id, len(record.parts), record.source)
        splits[split_of_index(index)].append(record.object_id)
    write_manifest(manifest, out_dir)
    write_json_atomic(splits, os.path.join(out_dir, "split.json"))
    return manifest
