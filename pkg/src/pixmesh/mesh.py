"""Template mesh topology and geometric primitives.

Posed meshes are plain ``(N_v, 3)`` arrays (or tensors) sharing the template
topology; the template carries everything that does not change with pose.

Per-vertex surface coordinates live in ``vertex_part``/``vertex_uv``. Faces
additionally carry per-corner charts (``face_part``/``face_uv``) so that a face
whose corners belong to different parts still has a single consistent UV chart;
the rasterizer interpolates those corner coordinates.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from . import autodiff as ad

logger = logging.getLogger(__name__)


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class JointRegressor:
    """Row-stochastic, nonnegative ``N_j x N_v`` matrix mapping vertices to joints."""

    W: np.ndarray
    names: tuple[str, ...] = ()
    root_index: int = 0

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        object.__setattr__(self, "W", W)
        if W.ndim != 2:
            raise ValueError(f"joint regressor must be 2-D, got {W.shape}")
        if np.any(W < 0):
            raise ValueError("joint regressor has negative entries")
        if not np.allclose(W.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise ValueError("joint regressor rows must sum to 1")
        if not 0 <= self.root_index < W.shape[0]:
            raise ValueError(f"root index {self.root_index} out of range")

    @property
    def num_joints(self) -> int:
        return self.W.shape[0]

    @classmethod
    def from_vertex_groups(cls, groups, num_vertices: int, names=(), root_index: int = 0) -> JointRegressor:
        W = np.zeros((len(groups), num_vertices))
        for j, idx in enumerate(groups):
            idx = np.asarray(idx, dtype=np.int64)
            W[j, idx] = 1.0 / len(idx)
        return cls(W, tuple(names), root_index)


@dataclass(eq=False)
class TemplateMesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_part: np.ndarray
    vertex_uv: np.ndarray
    part_count: int
    joint_regressor: JointRegressor
    face_part: np.ndarray | None = None
    face_uv: np.ndarray | None = None
    delta: np.ndarray | None = None
    part_names: tuple[str, ...] = ()
    texture_seed: int = 0
    rig: object | None = None
    delta_fallbacks: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.vertex_part = np.asarray(self.vertex_part, dtype=np.int64)
        self.vertex_uv = np.asarray(self.vertex_uv, dtype=np.float64)
        n = len(self.vertices)
        if self.vertices.shape != (n, 3) or self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise TopologyError(f"bad mesh arrays: vertices {self.vertices.shape}, faces {self.faces.shape}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise TopologyError("face index out of range")
        f = self.faces
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise TopologyError("degenerate face with repeated vertex index")
        if self.vertex_part.shape != (n,) or self.vertex_uv.shape != (n, 2):
            raise TopologyError("vertex iuv arrays do not match vertex count")
        if self.vertex_part.min() < 1 or self.vertex_part.max() > self.part_count:
            raise TopologyError(f"vertex part ids must lie in [1, {self.part_count}]")
        if self.vertex_uv.min() < 0 or self.vertex_uv.max() > 1:
            raise TopologyError("vertex uv must lie in [0, 1]")
        if self.part_count > 255:
            raise TopologyError("part ids must fit in one byte")
        if self.face_part is None:
            self.face_part = self.vertex_part[f[:, 0]].copy()
        self.face_part = np.asarray(self.face_part, dtype=np.int64)
        if self.face_uv is None:
            self.face_uv = self.vertex_uv[f]
        self.face_uv = np.asarray(self.face_uv, dtype=np.float64)
        if self.face_uv.shape != (len(f), 3, 2) or self.face_part.shape != (len(f),):
            raise TopologyError("face chart arrays do not match face count")
        if self.joint_regressor.W.shape[1] != n:
            raise TopologyError(
                f"joint regressor has {self.joint_regressor.W.shape[1]} columns for {n} vertices"
            )

        self.edges = unique_edges(f)
        adj = adjacency_matrix(self.edges, n)
        ncomp, _ = connected_components(adj, directed=False)
        if ncomp != 1:
            raise TopologyError(f"mesh graph has {ncomp} connected components")
        self.adjacency = adj
        self.neighbors = [adj.indices[adj.indptr[i]:adj.indptr[i + 1]] for i in range(n)]
        if self.delta is None:
            self.delta, self.delta_fallbacks = compute_delta(self)
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if self.delta.shape != (n,) or np.any(self.delta <= 0):
            raise TopologyError("delta must be positive for every vertex")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    @property
    def vertex_iuv(self) -> np.ndarray:
        return np.column_stack([self.vertex_part.astype(np.float64), self.vertex_uv])

    @property
    def joints(self) -> JointRegressor:
        return self.joint_regressor

    def part_adjacency(self) -> dict[int, set[int]]:
        """Parts that share a mesh edge (or a face) with each part."""
        out = {p: set() for p in range(1, self.part_count + 1)}
        i, j = self.edges[:, 0], self.edges[:, 1]
        pairs = set(zip(self.vertex_part[i].tolist(), self.vertex_part[j].tolist()))
        for f, fp in zip(self.faces, self.face_part):
            pairs.update((int(fp), int(p)) for p in self.vertex_part[f])
        for a, b in pairs:
            if a != b:
                out[a].add(b)
                out[b].add(a)
        return out


def unique_edges(faces: np.ndarray) -> np.ndarray:
    """Undirected edges of a triangle list, each once, as sorted ``(i, j)`` with ``i < j``."""
    f = np.asarray(faces, dtype=np.int64)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def adjacency_matrix(edges: np.ndarray, n: int) -> sp.csr_matrix:
    i, j = edges[:, 0], edges[:, 1]
    data = np.ones(2 * len(edges))
    A = sp.csr_matrix((data, (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(n, n))
    A.sum_duplicates()
    A.data[:] = 1.0
    A.sort_indices()
    return A


def normalized_adjacency(template_or_edges, n: int | None = None) -> sp.csr_matrix:
    """``D^-1/2 (A + I) D^-1/2`` with ``D`` the degree matrix of ``A + I``."""
    if isinstance(template_or_edges, TemplateMesh):
        A = template_or_edges.adjacency
        n = template_or_edges.num_vertices
    else:
        A = adjacency_matrix(np.asarray(template_or_edges, dtype=np.int64).reshape(-1, 2), n)
        if connected_components(A, directed=False)[0] != 1:
            raise TopologyError("graph is disconnected")
    At = (A + sp.identity(n, format="csr")).tocsr()
    d = np.asarray(At.sum(axis=1)).ravel()
    inv = 1.0 / np.sqrt(d)
    return sp.diags(inv) @ At @ sp.diags(inv)


def compute_delta(template: TemplateMesh) -> tuple[np.ndarray, np.ndarray]:
    """Per-vertex UV distance to the closest same-part 1-ring neighbour.

    Neighbours coincident in UV are ignored. Vertices with no usable neighbour
    get the median of the other thresholds; their indices are returned second.
    """
    n = template.num_vertices
    part, uv = template.vertex_part, template.vertex_uv
    delta = np.full(n, np.nan)
    for k in range(n):
        nb = template.neighbors[k]
        nb = nb[part[nb] == part[k]]
        if len(nb) == 0:
            continue
        d = np.sqrt(((uv[nb] - uv[k]) ** 2).sum(axis=1))
        d = d[d > 0]
        if len(d):
            delta[k] = d.min()
    fallback = np.flatnonzero(np.isnan(delta))
    if len(fallback) == n:
        raise TopologyError("no vertex has a same-part neighbour distinct in UV")
    if len(fallback):
        med = float(np.median(delta[~np.isnan(delta)]))
        delta[fallback] = med
        logger.info("delta: %d vertices without a usable same-part neighbour use median %.4g", len(fallback), med)
    return delta, fallback


def face_normals(vertices, faces, area_eps: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Unit normals ``normalize((b - a) x (c - a))`` and a validity mask.

    Faces with area below ``area_eps`` get a zero normal and ``valid=False``.
    """
    v = np.asarray(vertices.data if isinstance(vertices, ad.Tensor) else vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    cr = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    norm = np.linalg.norm(cr, axis=1)
    valid = 0.5 * norm >= area_eps
    n = np.zeros_like(cr)
    n[valid] = cr[valid] / norm[valid, None]
    return n, valid


def face_areas(vertices, faces) -> np.ndarray:
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    return 0.5 * np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1)


def regress_joints(W, mesh):
    """``J = W M``; differentiable when ``mesh`` is a tensor."""
    Wm = W.W if isinstance(W, JointRegressor) else np.asarray(W)
    rows = mesh.shape[0]
    if Wm.shape[1] != rows:
        raise ad.ShapeError(f"shape mismatch: regressor {Wm.shape} vs mesh {tuple(mesh.shape)}")
    if isinstance(mesh, ad.Tensor):
        return ad.matmul(ad.Tensor(Wm), mesh)
    return Wm @ np.asarray(mesh, dtype=np.float64)


# ---------------------------------------------------------------------------
# OBJ

def export_obj(vertices, faces, path: str | os.PathLike) -> None:
    v = np.asarray(vertices.data if isinstance(vertices, ad.Tensor) else vertices, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot export non-finite vertex coordinates")
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in v]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces, dtype=np.int64)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_obj(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(t) for t in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(t.split("/")[0]) for t in parts[1:]]
                # fan-triangulate polygons
                for a in range(1, len(idx) - 1):
                    faces.append([idx[0] - 1, idx[a] - 1, idx[a + 1] - 1])
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


# ---------------------------------------------------------------------------
# JSON

def template_to_dict(t: TemplateMesh) -> dict:
    W = t.joint_regressor.W
    r, c = np.nonzero(W)
    return {
        "vertices": t.vertices.tolist(),
        "faces": t.faces.tolist(),
        "iuv": [[int(p), float(u), float(v)] for p, (u, v) in zip(t.vertex_part, t.vertex_uv)],
        "delta": t.delta.tolist(),
        "part_count": int(t.part_count),
        "part_names": list(t.part_names),
        "face_part": t.face_part.tolist(),
        "face_uv": t.face_uv.tolist(),
        "texture_seed": int(t.texture_seed),
        "joints": {
            "shape": list(W.shape),
            "triplets": [[int(i), int(j), float(W[i, j])] for i, j in zip(r, c)],
            "names": list(t.joint_regressor.names),
            "root_index": int(t.joint_regressor.root_index),
        },
    }


def template_from_dict(d: dict) -> TemplateMesh:
    iuv = np.asarray(d["iuv"], dtype=np.float64).reshape(-1, 3)
    jd = d["joints"]
    W = np.zeros(jd["shape"])
    for i, j, w in jd["triplets"]:
        W[int(i), int(j)] = w
    return TemplateMesh(
        vertices=d["vertices"],
        faces=d["faces"],
        vertex_part=iuv[:, 0].astype(np.int64),
        vertex_uv=iuv[:, 1:],
        part_count=int(d["part_count"]),
        joint_regressor=JointRegressor(W, tuple(jd.get("names", ())), int(jd.get("root_index", 0))),
        face_part=d.get("face_part"),
        face_uv=d.get("face_uv"),
        delta=d.get("delta"),
        part_names=tuple(d.get("part_names", ())),
        texture_seed=int(d.get("texture_seed", 0)),
    )


def save_template(t: TemplateMesh, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        json.dump(template_to_dict(t), fh)


def load_template(path: str | os.PathLike) -> TemplateMesh:
    with open(path) as fh:
        return template_from_dict(json.load(fh))


def rotation_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)
