"""Mesh regression losses and their fixed weighting.

All losses are sums (not means) and accept a :class:`~pixmesh.autodiff.Tensor`
prediction so they can be differentiated; targets are plain arrays.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .mesh import JointRegressor, face_normals, regress_joints, unique_edges

logger = logging.getLogger(__name__)

WEIGHTS = {"vertex": 1.0, "joint": 1.0, "normal": 0.1, "edge": 0.1}
NORM_EPS = 1e-12


def _check_pair(M, target) -> np.ndarray:
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if tuple(M.shape) != t.shape or t.ndim != 2 or t.shape[1] != 3:
        raise ShapeError(f"shape mismatch: prediction {tuple(M.shape)} vs target {t.shape}")
    return t


def _faces(mesh_or_faces) -> np.ndarray:
    return np.asarray(getattr(mesh_or_faces, "faces", mesh_or_faces), dtype=np.int64)


def _edges(mesh_or_faces) -> np.ndarray:
    e = getattr(mesh_or_faces, "edges", None)
    return e if e is not None else unique_edges(_faces(mesh_or_faces))


def loss_vertex(M, target) -> Tensor:
    M = ad.as_tensor(M)
    t = _check_pair(M, target)
    return ad.tsum(ad.tabs(M - Tensor(t)))


def loss_joint(M, target, W: JointRegressor) -> Tensor:
    M = ad.as_tensor(M)
    t = _check_pair(M, target)
    J = regress_joints(W, M)
    return ad.tsum(ad.tabs(J - Tensor(regress_joints(W, t))))


def loss_edge(M, target, template) -> Tensor:
    """Sum over unique edges of the absolute edge-length difference."""
    M = ad.as_tensor(M)
    t = _check_pair(M, target)
    e = _edges(template)
    d = ad.gather_rows(M, e[:, 0]) - ad.gather_rows(M, e[:, 1])
    ref = np.linalg.norm(t[e[:, 0]] - t[e[:, 1]], axis=1)
    return ad.tsum(ad.tabs(ad.norm_l2(d, axis=1) - Tensor(ref)))


@dataclass
class NormalLossStats:
    skipped_faces: int = 0  # degenerate target faces
    skipped_edges: int = 0  # zero-length predicted edges


def loss_normal(M, target, template, stats: NormalLossStats | None = None) -> Tensor:
    """Sum of ``|<unit predicted edge, target face normal>|`` over the 3 edges of every face.

    Target faces with zero area and predicted edges shorter than 1e-12 are
    left out; their counts go into ``stats`` when given.
    """
    M = ad.as_tensor(M)
    t = _check_pair(M, target)
    f = _faces(template)
    normals, valid = face_normals(t, f)
    f, normals = f[valid], normals[valid]
    i = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    j = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    n = np.concatenate([normals, normals, normals])
    lengths = np.linalg.norm(M.data[i] - M.data[j], axis=1)
    keep = lengths >= NORM_EPS
    if stats is not None:
        stats.skipped_faces += int((~valid).sum())
        stats.skipped_edges += int((~keep).sum())
    if (~keep).any():
        logger.debug("normal loss skipped %d zero-length edges", int((~keep).sum()))
    i, j, n = i[keep], j[keep], n[keep]
    if len(i) == 0:
        return ad.tsum(M * 0.0)
    d = ad.gather_rows(M, i) - ad.gather_rows(M, j)
    cos = ad.dot(d, Tensor(n), axis=1) / ad.norm_l2(d, axis=1)
    return ad.tsum(ad.tabs(cos))


def weighted_total(l_vertex, l_joint, l_edge, l_normal):
    """``vertex + joint + 0.1 normal + 0.1 edge``; works on floats and tensors alike."""
    return l_vertex + l_joint + l_normal * WEIGHTS["normal"] + l_edge * WEIGHTS["edge"]


@dataclass(eq=False)
class LossReport:
    total: Tensor
    l_vertex: float
    l_joint: float
    l_edge: float
    l_normal: float
    l_total: float
    normal_stats: NormalLossStats

    def row(self) -> dict[str, float]:
        return {"l_vertex": self.l_vertex, "l_joint": self.l_joint, "l_edge": self.l_edge,
                "l_normal": self.l_normal, "l_total": self.l_total}


def combined_loss(M, target, W: JointRegressor, template) -> LossReport:
    M = ad.as_tensor(M)
    stats = NormalLossStats()
    lv = loss_vertex(M, target)
    lj = loss_joint(M, target, W)
    le = loss_edge(M, target, template)
    ln = loss_normal(M, target, template, stats)
    total = weighted_total(lv, lj, le, ln)
    return LossReport(total, lv.item(), lj.item(), le.item(), ln.item(), total.item(), stats)
