"""Sparse anchor-point representation of part assemblies.

Per-part anchor quota by area (largest remainder with a minimum),
paired (input, target) anchor sets related by exact per-part rigid
motions, Fourier part-index embeddings, and a rigid-invariant local
shape descriptor used as the per-anchor condition feature.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .curation import AssemblyRecord
from .geometry import farthest_point_sample, normalize_object, sample_surface

ANCHOR_MAGIC = b"ANC1"

DESCRIPTOR_WIDTH = 16  # C_d: padded width of the per-anchor shape feature
INDEX_EMBED_WIDTH = 32  # C_e: default part-index embedding width
DEFAULT_M = 1024
DEFAULT_Q = 4096
MIN_ANCHORS_PER_PART = 10
DESCRIPTOR_K = 32


@dataclass
class AnchorSet:
    """M anchor coordinates with contiguous per-part spans and labels."""

    points: np.ndarray  # (M, 3)
    part_spans: list  # [(start, length)] in part order
    part_ids: np.ndarray  # (M,) int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.part_spans = [(int(s), int(l)) for s, l in self.part_spans]
        self.part_ids = np.asarray(self.part_ids, dtype=np.int64).reshape(-1)

    def validate(self) -> None:
        m = len(self.points)
        if sum(l for _, l in self.part_spans) != m or len(self.part_ids) != m:
            raise ValueError("span lengths do not sum to point count")
        cursor = 0
        for pid, (start, length) in enumerate(self.part_spans):
            if start != cursor or length < 2:
                raise ValueError("spans must be contiguous, ordered, length >= 2")
            if not np.all(self.part_ids[start:start + length] == pid):
                raise ValueError("part_ids inconsistent with spans")
            cursor += length
        if not np.all(np.isfinite(self.points)):
            raise ValueError("non-finite anchor coordinates")

    @staticmethod
    def from_part_clouds(clouds: list) -> "AnchorSet":
        spans, ids, cursor = [], [], 0
        for pid, c in enumerate(clouds):
            spans.append((cursor, len(c)))
            ids.extend([pid] * len(c))
            cursor += len(c)
        return AnchorSet(np.concatenate(clouds, axis=0), spans, np.array(ids))

    def part_points(self, pid: int) -> np.ndarray:
        start, length = self.part_spans[pid]
        return self.points[start:start + length]

    @property
    def num_parts(self) -> int:
        return len(self.part_spans)


@dataclass(frozen=True)
class AllocationPlan:
    counts: list
    total: int


def allocate_anchors(areas, total: int, min_per_part: int = MIN_ANCHORS_PER_PART) -> AllocationPlan:
    """Largest-remainder apportionment proportional to area, clamped below.

    Parts falling under min_per_part are pinned there and the remainder
    is re-apportioned among the others; the counts always sum to total.
    """
    areas = np.asarray(areas, dtype=np.float64)
    n = len(areas)
    if np.any(areas <= 0):
        raise ValueError("areas must be positive")
    if total < 2 * n:
        raise ValueError("too few anchors")
    min_per_part = min(min_per_part, total // n)  # relax when part count forces it

    def largest_remainder(weights, budget):
        quota = weights / weights.sum() * budget
        base = np.floor(quota).astype(np.int64)
        short = budget - int(base.sum())
        frac = quota - base
        order = np.lexsort((np.arange(len(weights)), -frac))
        base[order[:short]] += 1
        return base

    counts = largest_remainder(areas, total)
    pinned = np.zeros(n, dtype=bool)
    while True:
        low = (counts < min_per_part) & ~pinned
        if not low.any():
            break
        pinned |= low
        counts[pinned] = min_per_part
        free = ~pinned
        budget = total - min_per_part * int(pinned.sum())
        if not free.any():
            break
        counts[free] = largest_remainder(areas[free], budget)
    return AllocationPlan([int(c) for c in counts], total)


def part_seed(seed: int, part: int) -> int:
    return int(np.random.SeedSequence([seed, part]).generate_state(1)[0])


def build_anchor_pair(record: AssemblyRecord, total: int = DEFAULT_M,
                      dense_count: int = DEFAULT_Q, seed: int = 0,
                      min_per_part: int = MIN_ANCHORS_PER_PART):
    """Paired (input, target) anchor sets plus normalized dense clouds.

    Target anchors are farthest-point subsets of dense surface samples
    of the ground-truth-posed parts, in the object-normalized frame.
    Input anchors are the same points carried into each part's initial
    pose, with identical intra-part ordering, so the two sets are
    related part-wise by exact rigid motions.
    """
    record.validate()
    scale, offset = normalize_object(record.parts)
    plan = allocate_anchors(record.areas, total, min_per_part)
    target_clouds, input_clouds, dense_clouds = [], [], []
    for i, (part, pose) in enumerate(zip(record.parts, record.initial_poses)):
        s = part_seed(seed, i)
        dense = sample_surface(part, dense_count, s)
        dense_norm = (dense + offset) * scale
        anchors_norm, _ = farthest_point_sample(dense_norm, plan.counts[i], s)
        target_clouds.append(anchors_norm)
        # Same points expressed in the part's augmented start pose.
        moved = pose.apply(anchors_norm / scale - offset)
        input_clouds.append((moved + offset) * scale)
        dense_clouds.append(dense_norm)
    target = AnchorSet.from_part_clouds(target_clouds)
    input_set = AnchorSet.from_part_clouds(input_clouds)
    target.validate()
    input_set.validate()
    return input_set, target, dense_clouds


def part_index_embedding(index: int, dim: int = INDEX_EMBED_WIDTH) -> np.ndarray:
    """Interleaved (sin, cos) of the part index over geometric frequencies."""
    if index < 0:
        raise ValueError("index must be >= 0")
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = np.exp(-np.log(1e4) * np.arange(half) / max(half - 1, 1))
    emb = np.empty(dim, dtype=np.float64)
    emb[0::2] = np.sin(index * freqs)
    emb[1::2] = np.cos(index * freqs)
    return emb


def shape_descriptor(dense: np.ndarray, anchors: np.ndarray,
                     k: int = DESCRIPTOR_K) -> np.ndarray:
    """Per-anchor local geometry features, invariant to rigid motion.

    Row layout (width DESCRIPTOR_WIDTH, zero padded):
      [0:3]  sorted local covariance eigenvalues / trace
      [3:6]  |centroid offset| in the local eigenframe
      [6:8]  mean and max neighbor radius / cloud bounding radius
      [8]    mean neighbor radius / uniform-density expectation
    """
    dense = np.asarray(dense, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    if k > len(dense):
        raise ValueError(f"k={k} exceeds dense cloud size {len(dense)}")
    center = dense.mean(axis=0)
    bound_r = max(float(np.linalg.norm(dense - center, axis=1).max()), 1e-12)
    expected_r = bound_r * (k / len(dense)) ** (1.0 / 3.0)
    out = np.zeros((len(anchors), DESCRIPTOR_WIDTH), dtype=np.float64)
    d2 = ((dense[None, :, :] - anchors[:, None, :]) ** 2).sum(axis=2)
    nn = np.argpartition(d2, k - 1, axis=1)[:, :k]
    for row, a in enumerate(anchors):
        nb = dense[nn[row]]
        radii = np.linalg.norm(nb - a, axis=1)
        centroid = nb.mean(axis=0)
        cov = (nb - centroid).T @ (nb - centroid) / k
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1]
        evals, evecs = evals[order], evecs[:, order]
        trace = max(float(evals.sum()), 1e-18)
        offset = centroid - a
        out[row, 0:3] = evals / trace
        out[row, 3:6] = np.abs(offset @ evecs)
        out[row, 6] = radii.mean() / bound_r
        out[row, 7] = radii.max() / bound_r
        out[row, 8] = radii.mean() / expected_r
    return out


def descriptors_for_anchor_set(anchor_set: AnchorSet, dense_clouds: list,
                               k: int = DESCRIPTOR_K) -> np.ndarray:
    rows = [shape_descriptor(dense_clouds[i], anchor_set.part_points(i), k)
            for i in range(anchor_set.num_parts)]
    return np.concatenate(rows, axis=0)


def save_anchors(anchor_set: AnchorSet, path) -> None:
    """Little-endian binary: magic, u32 M, u32 part count, spans, float32 points."""
    anchor_set.validate()
    with open(path, "wb") as fh:
        fh.write(ANCHOR_MAGIC)
        fh.write(struct.pack("<II", len(anchor_set.points), anchor_set.num_parts))
        for start, length in anchor_set.part_spans:
            fh.write(struct.pack("<II", start, length))
        fh.write(np.asarray(anchor_set.points, dtype="<f4").tobytes())


def load_anchors(path) -> AnchorSet:
    with open(path, "rb") as fh:
        if fh.read(4) != ANCHOR_MAGIC:
            raise ValueError("bad anchor-set magic")
        m, nparts = struct.unpack("<II", fh.read(8))
        spans = [struct.unpack("<II", fh.read(8)) for _ in range(nparts)]
        points = np.frombuffer(fh.read(m * 12), dtype="<f4").reshape(m, 3)
    ids = np.concatenate([np.full(l, pid) for pid, (_, l) in enumerate(spans)])
    out = AnchorSet(points.astype(np.float64), spans, ids)
    out.validate()
    return out
