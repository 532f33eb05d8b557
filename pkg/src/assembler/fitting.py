"""Least-squares rigid pose recovery from corresponded anchor points.

Closed-form SVD (Kabsch/Umeyama without scale) with reflection
exclusion; per-part fitting over shared anchor spans; mesh assembly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import RigidTransform, TriangleMesh


@dataclass(frozen=True)
class FitResult:
    """Recovered rigid transform, residual RMSE, and rank-deficiency flag."""

    transform: RigidTransform
    rmse: float
    underdetermined: bool = False


def umeyama_fit(src: np.ndarray, dst: np.ndarray) -> FitResult:
    """Rigid transform minimizing mean squared error of src[i] -> dst[i].

    No scale, no reflection: det(R) = +1 is enforced by sign-correcting
    the smallest singular direction. `underdetermined` is set when the
    source covariance has rank < 2 (a rotation axis is then free; the
    rotation closest to identity about that axis is returned).
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError(f"correspondence size mismatch: {src.shape} vs {dst.shape}")
    if len(src) < 2:
        raise ValueError("need at least 2 correspondences")

    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cs, cd = src - mu_s, dst - mu_d
    cross = cd.T @ cs / len(src)
    u, s, vt = np.linalg.svd(cross)
    d = np.sign(np.linalg.det(u @ vt))
    corr = np.diag([1.0, 1.0, d])
    rot = u @ corr @ vt

    src_scale = float(np.linalg.norm(cs, axis=1).max())
    rank = int(np.sum(s > 1e-9 * max(s[0], 1e-300)))
    underdetermined = rank < 2
    if underdetermined and src_scale > 0:
        # Collinear source: rotation about the point axis is free.
        # Pick the rotation closest to identity that still maps the
        # source axis onto the best-fit destination axis.
        axis_s = _principal_axis(cs)
        axis_d = _principal_axis(cd)
        if axis_s @ axis_d < 0:
            axis_d = -axis_d
        rot = _rotation_between(axis_s, axis_d)
    elif underdetermined:
        rot = np.eye(3)

    trans = mu_d - rot @ mu_s
    residual = cd - cs @ rot.T
    rmse = float(np.sqrt((residual ** 2).sum(axis=1).mean()))
    return FitResult(RigidTransform(rot, trans), rmse, underdetermined)


def _principal_axis(centered: np.ndarray) -> np.ndarray:
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axis = vt[0]
    if axis[np.argmax(np.abs(axis))] < 0:
        axis = -axis
    return axis


def _rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimal-angle rotation taking unit vector a to unit vector b."""
    v = np.cross(a, b)
    c = float(a @ b)
    if c < -1.0 + 1e-12:
        # Antipodal: rotate pi about any axis orthogonal to a.
        ortho = np.eye(3)[np.argmin(np.abs(a))]
        axis = np.cross(a, ortho)
        axis /= np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + vx + vx @ vx / (1.0 + c)


def fit_all_parts(input_anchors, generated_anchors) -> list[FitResult]:
    """One rigid fit per part between anchor sets sharing identical spans."""
    if input_anchors.part_spans != generated_anchors.part_spans:
        raise ValueError("anchor sets have mismatched part spans")
    fits = []
    for start, length in input_anchors.part_spans:
        fits.append(umeyama_fit(input_anchors.points[start:start + length],
                                generated_anchors.points[start:start + length]))
    return fits


def assemble(parts: list[TriangleMesh], fits: list[FitResult]) -> list[TriangleMesh]:
    """Apply each part's recovered transform to its mesh."""
    if len(parts) != len(fits):
        raise ValueError(f"{len(parts)} parts but {len(fits)} fits")
    return [p.transformed(f.transform) for p, f in zip(parts, fits)]
