"""Joint-position error metrics and closed-form similarity alignment."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray  # (3, 3), proper
    translation: np.ndarray  # (3,)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return self.scale * p @ self.rotation.T + self.translation


def _pair(J, target, mask=None) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(J, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"joint sets disagree: {a.shape} vs {b.shape}")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != a.shape[:1]:
            raise ValueError(f"joint mask has shape {m.shape}, expected {a.shape[:1]}")
        a, b = a[m], b[m]
    return a, b


def mpjpe(J, target, root_index: int = 0, mask=None) -> float:
    """Mean joint distance after moving both root joints to the origin."""
    a, b = _pair(J, target)
    if not 0 <= root_index < len(a):
        raise ValueError(f"root index {root_index} out of range for {len(a)} joints")
    a = a - a[root_index]
    b = b - b[root_index]
    if mask is not None:
        a, b = _pair(a, b, mask)
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


def procrustes_align(J, target, rel_tol: float = 1e-10) -> SimilarityTransform:
    """Least-squares ``(s, R, t)`` with ``s R J + t`` closest to ``target``.

    Uses the SVD of the centred cross-covariance with a sign flip on the last
    singular direction whenever that keeps ``R`` a proper rotation.
    """
    a, b = _pair(J, target)
    if len(a) < 3:
        raise DegenerateConfigurationError(f"need at least 3 joints, got {len(a)}")
    ma, mb = a.mean(axis=0), b.mean(axis=0)
    x, y = a - ma, b - mb
    sx = np.linalg.svd(x, compute_uv=False)
    if sx[0] <= 0.0 or sx[1] <= rel_tol * sx[0]:
        raise DegenerateConfigurationError(
            f"source joints are coincident or collinear (singular values {sx.tolist()})"
        )
    cov = y.T @ x / len(a)
    U, S, Vt = np.linalg.svd(cov)
    d = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        d[2] = -1.0
    R = (U * d) @ Vt
    var = np.sum(x * x) / len(a)
    s = float(np.sum(S * d) / var)
    return SimilarityTransform(s, R, mb - s * R @ ma)


def pa_mpjpe(J, target, mask=None) -> float:
    """Mean joint distance after optimal similarity alignment of ``J`` onto ``target``."""
    a, b = _pair(J, target, mask)
    T = procrustes_align(a, b)
    return float(np.mean(np.linalg.norm(T.apply(a) - b, axis=1)))
