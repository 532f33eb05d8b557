"""Mesh and point-cloud primitives.

Connected-component segmentation, area-weighted surface sampling,
farthest point sampling, rigid transforms, normalization and PCA
canonicalization, plus OBJ / point-cloud file IO.

All functions are pure; point clouds are plain (N, 3) float arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

# Vertices closer than this fraction of the bbox diagonal are welded
# before connectivity analysis (artist meshes duplicate seam vertices).
WELD_TOLERANCE = 1e-7

APC_MAGIC = b"APC1"


def _philox(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream), reproducible per key."""
    return np.random.Generator(np.random.Philox(key=np.array(
        [seed & 0xFFFFFFFFFFFFFFFF, stream & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)))


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (det = +1) plus translation; p -> R p + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def validate(self, tol: float = 1e-6) -> None:
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > tol:
            raise ValueError(f"rotation not orthonormal (max deviation {err:g})")
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) > tol:
            raise ValueError(f"rotation determinant {det:g} != +1")

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Returns self ∘ other: first apply `other`, then `self`."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


@dataclass
class TriangleMesh:
    """Indexed triangle mesh: vertices (V, 3) float64, faces (F, 3) int."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    def validate(self) -> None:
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        if len(self.faces):
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) & (f[:, 1] == f[:, 2])):
                raise ValueError("degenerate face with three identical indices")
        if len(self.vertices) and len(self.vertices) < 3:
            raise ValueError("non-empty mesh needs at least 3 vertices")

    def triangle_corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        v = self.vertices
        return v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]

    def transformed(self, t: RigidTransform) -> "TriangleMesh":
        return TriangleMesh(t.apply(self.vertices), self.faces.copy())

    def copy(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices.copy(), self.faces.copy())


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned bounding box."""

    min: np.ndarray = field(default_factory=lambda: np.zeros(3))
    max: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @staticmethod
    def of_points(points: np.ndarray) -> "Aabb":
        points = np.asarray(points, dtype=np.float64)
        if points.size == 0:
            raise ValueError("empty point set has no bounding box")
        return Aabb(points.min(axis=0), points.max(axis=0))

    def union(self, other: "Aabb") -> "Aabb":
        return Aabb(np.minimum(self.min, other.min), np.maximum(self.max, other.max))

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    def intersection_volume(self, other: "Aabb") -> float:
        overlap = np.minimum(self.max, other.max) - np.maximum(self.min, other.min)
        if np.any(overlap <= 0):
            return 0.0
        return float(np.prod(overlap))


def triangle_areas(mesh: TriangleMesh) -> np.ndarray:
    a, b, c = mesh.triangle_corners()
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def surface_area(mesh: TriangleMesh) -> float:
    if len(mesh.faces) == 0:
        return 0.0
    return float(triangle_areas(mesh).sum())


def _weld_labels(vertices: np.ndarray) -> np.ndarray:
    """Label vertices so that positions within the weld tolerance share a label."""
    if len(vertices) == 0:
        return np.zeros(0, dtype=np.int64)
    bbox = Aabb.of_points(vertices)
    diag = float(np.linalg.norm(bbox.extent))
    if diag == 0.0:
        return np.zeros(len(vertices), dtype=np.int64)
    cell = WELD_TOLERANCE * diag
    keys = np.round(vertices / cell).astype(np.int64)
    _, labels = np.unique(keys, axis=0, return_inverse=True)
    return labels


def connected_components(mesh: TriangleMesh) -> list[TriangleMesh]:
    """Split a mesh into maximal face groups connected via shared (welded) vertices.

    Output is ordered by descending surface area, ties broken by the
    lowest face index contained in the component. The union of the
    outputs reproduces the input faces.
    """
    if len(mesh.faces) == 0:
        return []
    labels = _weld_labels(mesh.vertices)
    n_labels = int(labels.max()) + 1
    parent = np.arange(n_labels)

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    welded = labels[mesh.faces]
    for f in welded:
        a, b, c = find(f[0]), find(f[1]), find(f[2])
        parent[b] = a
        parent[find(c)] = a

    face_root = np.array([find(w[0]) for w in welded])
    comp_faces: dict[int, list[int]] = {}
    for i, r in enumerate(face_root):
        comp_faces.setdefault(int(r), []).append(i)

    parts = []
    for face_idx in comp_faces.values():
        faces = mesh.faces[face_idx]
        used = np.unique(faces)
        remap = np.zeros(len(mesh.vertices), dtype=np.int64)
        remap[used] = np.arange(len(used))
        sub = TriangleMesh(mesh.vertices[used], remap[faces])
        parts.append((surface_area(sub), face_idx[0], sub))
    parts.sort(key=lambda t: (-t[0], t[1]))
    return [p for _, _, p in parts]


def sample_surface(mesh: TriangleMesh, n: int, seed: int) -> np.ndarray:
    """Draw n area-weighted surface points, barycentric-uniform per triangle.

    Deterministic per seed: the triangle draw uses stream 0 of the
    counter-based PRNG, barycentric draws use stream (triangle index + 1).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    areas = triangle_areas(mesh) if len(mesh.faces) else np.zeros(0)
    total = areas.sum()
    if total <= 0.0:
        raise ValueError("degenerate surface")
    counts = _philox(seed, 0).multinomial(n, areas / total)
    a, b, c = mesh.triangle_corners()
    chunks = []
    for tri in np.nonzero(counts)[0]:
        k = int(counts[tri])
        uv = _philox(seed, int(tri) + 1).random((k, 2))
        flip = uv.sum(axis=1) > 1.0
        uv[flip] = 1.0 - uv[flip]
        u, v = uv[:, :1], uv[:, 1:]
        chunks.append(a[tri] + u * (b[tri] - a[tri]) + v * (c[tri] - a[tri]))
    return np.concatenate(chunks, axis=0)


def farthest_point_sample(points: np.ndarray, k: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Greedy max-min subset of k points; returns (points, indices into input)."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for cloud of size {n}")
    start = int(_philox(seed, 0).integers(n))
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    dist = np.linalg.norm(points - points[start], axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return points[chosen], chosen


def apply_transform(points: np.ndarray, t: RigidTransform) -> np.ndarray:
    return t.apply(points)


def normalize_object(parts: list[TriangleMesh]) -> tuple[float, np.ndarray]:
    """Uniform scale and offset mapping the union bbox into [-0.5, 0.5]^3.

    Normalized point = (p + offset) * scale.
    """
    if not parts or all(len(p.vertices) == 0 for p in parts):
        raise ValueError("empty part union")
    allv = np.concatenate([p.vertices for p in parts if len(p.vertices)], axis=0)
    bbox = Aabb.of_points(allv)
    longest = float(bbox.extent.max())
    if longest <= 0.0:
        raise ValueError("zero-extent union")
    return 1.0 / longest, -bbox.center


def pca_canonicalize(points: np.ndarray) -> RigidTransform:
    """Rigid transform aligning principal axes to x, y, z with fixed signs.

    Eigenvectors ordered by descending eigenvalue; each is flipped so
    its largest-magnitude coordinate is positive; the third axis is the
    cross product of the first two (det = +1). The centroid maps to the
    origin. Raises on rank-deficient covariance.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 3:
        raise ValueError("degenerate part")
    centroid = points.mean(axis=0)
    centered = points - centroid
    cov = centered.T @ centered / len(points)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    if evals[1] <= 1e-12 * max(evals[0], 1e-300):
        raise ValueError("degenerate part")
    axes = []
    for i in range(2):
        v = evecs[:, i]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        axes.append(v)
    axes.append(np.cross(axes[0], axes[1]))
    rot = np.stack(axes, axis=0)
    return RigidTransform(rot, -rot @ centroid)


# ---------------------------------------------------------------------------
# File IO


def load_obj(path) -> TriangleMesh:
    """ASCII OBJ reader: v/f records, 1-based indices, fan triangulation."""
    vertices, faces = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                vertices.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                idx = [int(t.split("/")[0]) for t in tok[1:]]
                idx = [i - 1 if i > 0 else len(vertices) + i for i in idx]
                for j in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[j], idx[j + 1]])
    mesh = TriangleMesh(np.array(vertices, dtype=np.float64).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3))
    mesh.validate()
    return mesh


def save_obj(mesh: TriangleMesh, path) -> None:
    # %.17g round-trips float64 exactly, keeping sampled evaluation
    # clouds bitwise stable across a save/load cycle
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def save_points_csv(points: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("x,y,z\n")
        for p in np.asarray(points):
            fh.write(f"{p[0]:.9g},{p[1]:.9g},{p[2]:.9g}\n")


def save_points_binary(points: np.ndarray, path) -> None:
    """Raw little-endian float32 triplets with an 8-byte header (magic + count)."""
    points = np.asarray(points, dtype="<f4").reshape(-1, 3)
    with open(path, "wb") as fh:
        fh.write(APC_MAGIC)
        fh.write(struct.pack("<I", len(points)))
        fh.write(points.tobytes())


def load_points_binary(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != APC_MAGIC:
            raise ValueError(f"bad point-cloud magic {magic!r}")
        (count,) = struct.unpack("<I", fh.read(4))
        data = np.frombuffer(fh.read(count * 12), dtype="<f4")
    return data.reshape(count, 3).astype(np.float64)
