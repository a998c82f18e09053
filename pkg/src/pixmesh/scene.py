"""Synthetic scenes: posed ground-truth meshes, z-buffered IUV renders and input images.

Projection is orthographic: ``row = cy - scale * y``, ``col = cx + scale * x``,
depth ``z`` grows toward the camera. Pixel ``(r, c)`` has its centre at the
continuous coordinate ``(r, c)``.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from .correspondence import IuvImage, save_iuv
from .mesh import TemplateMesh, export_obj, rotation_matrix
from .tensorio import save_tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Camera:
    scale: float
    cx: float
    cy: float
    depth_near: float = 1.5  # depth mapped to 1 in the image depth channel
    depth_far: float = -1.5  # depth mapped to 0

    @classmethod
    def fit(cls, H: int, W: int, half_extent: float = 1.2, center_y: float = -0.05) -> Camera:
        s = min(H, W) / (2.0 * half_extent)
        return cls(s, (W - 1) / 2.0, (H - 1) / 2.0 + s * center_y)

    @classmethod
    def frame(cls, vertices, H: int, W: int, margin: float = 1.14) -> Camera:
        """Fit the bounding box of ``vertices`` (x and y) with a relative margin."""
        v = np.asarray(vertices, dtype=np.float64)
        lo, hi = v[:, :2].min(axis=0), v[:, :2].max(axis=0)
        half = margin * 0.5 * float(np.max(hi - lo))
        s = min(H, W) / (2.0 * half)
        cx = (W - 1) / 2.0 - s * 0.5 * (lo[0] + hi[0])
        return cls(s, cx, (H - 1) / 2.0 + s * 0.5 * (lo[1] + hi[1]))

    def project(self, vertices) -> np.ndarray:
        """``(N, 3)`` array of continuous ``(row, col, depth)``."""
        v = np.asarray(vertices, dtype=np.float64)
        return np.column_stack([self.cy - self.scale * v[:, 1], self.cx + self.scale * v[:, 0], v[:, 2]])


@dataclass(eq=False)
class RasterResult:
    depth: np.ndarray  # (H, W), -inf on background
    face: np.ndarray  # (H, W) int64, -1 on background
    bary: np.ndarray  # (H, W, 3)

    @property
    def foreground(self) -> np.ndarray:
        return self.face >= 0


def rasterize(vertices, faces, camera: Camera, H: int, W: int, eps: float = 1e-9) -> RasterResult:
    """Bounding-box triangle fill with a z-buffer; equal depths keep the lower face index."""
    P = camera.project(vertices)
    depth = np.full((H, W), -np.inf)
    face_id = np.full((H, W), -1, dtype=np.int64)
    bary = np.zeros((H, W, 3))
    f = np.asarray(faces, dtype=np.int64)
    tri = P[f]  # (F, 3, 3)
    lo = np.floor(tri[:, :, :2].min(axis=1)).astype(np.int64)
    hi = np.ceil(tri[:, :, :2].max(axis=1)).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi[:, 0] = np.minimum(hi[:, 0], H - 1)
    hi[:, 1] = np.minimum(hi[:, 1], W - 1)
    for fi in range(len(f)):
        r0, r1 = lo[fi, 0], hi[fi, 0]
        c0, c1 = lo[fi, 1], hi[fi, 1]
        if r1 < r0 or c1 < c0:
            continue
        (ya, xa, za), (yb, xb, zb), (yc, xc, zc) = tri[fi]
        den = (yb - yc) * (xa - xc) + (xc - xb) * (ya - yc)
        if abs(den) < 1e-14:
            continue
        rr, cc = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
        w0 = ((yb - yc) * (cc - xc) + (xc - xb) * (rr - yc)) / den
        w1 = ((yc - ya) * (cc - xc) + (xa - xc) * (rr - yc)) / den
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -eps) & (w1 >= -eps) & (w2 >= -eps)
        if not inside.any():
            continue
        z = w0 * za + w1 * zb + w2 * zc
        win = inside & (z > depth[r0 : r1 + 1, c0 : c1 + 1])
        if not win.any():
            continue
        rw, cw = rr[win], cc[win]
        depth[rw, cw] = z[win]
        face_id[rw, cw] = fi
        bary[rw, cw] = np.stack([w0[win], w1[win], w2[win]], axis=1)
    if not (face_id >= 0).any():
        logger.warning("mesh does not cover any pixel of the %dx%d image", H, W)
    return RasterResult(depth, face_id, bary)


def iuv_from_raster(raster: RasterResult, template: TemplateMesh) -> IuvImage:
    H, W = raster.face.shape
    part = np.zeros((H, W), np.uint8)
    uv = np.zeros((H, W, 2))
    fg = raster.foreground
    fid = raster.face[fg]
    part[fg] = template.face_part[fid]
    uv[fg] = np.einsum("nk,nkc->nc", raster.bary[fg], template.face_uv[fid])
    return IuvImage(part, uv)


def rasterize_iuv(mesh, template: TemplateMesh, camera: Camera, H: int, W: int) -> IuvImage:
    """IUV render: part of the winning face and its corner UVs blended barycentrically."""
    return iuv_from_raster(rasterize(mesh, template.faces, camera, H, W), template)


def vertex_texture(template: TemplateMesh, seed: int | None = None) -> np.ndarray:
    rng = np.random.default_rng(template.texture_seed if seed is None else seed)
    return rng.uniform(0.2, 1.0, template.num_vertices)


def synthesize_image(mesh, template: TemplateMesh, camera: Camera, seed: int | None, H: int, W: int,
                     raster: RasterResult | None = None) -> np.ndarray:
    """Three-channel ``(3, H, W)`` image: normalised depth, part id / P, texture.

    The texture is a per-vertex random value drawn from ``seed`` (the
    template's texture seed when ``None``) and blended barycentrically.
    """
    raster = raster or rasterize(mesh, template.faces, camera, H, W)
    img = np.zeros((3, H, W))
    fg = raster.foreground
    fid = raster.face[fg]
    span = camera.depth_near - camera.depth_far
    img[0][fg] = np.clip((raster.depth[fg] - camera.depth_far) / span, 0.0, 1.0)
    img[1][fg] = template.face_part[fid] / template.part_count
    tex = vertex_texture(template, seed)
    img[2][fg] = np.einsum("nk,nk->n", raster.bary[fg], tex[template.faces[fid]])
    return img


def vertex_visibility(mesh, camera: Camera, raster: RasterResult, tol: float | None = None) -> np.ndarray:
    """Vertices whose depth is within ``tol`` of the z-buffer at their nearest pixel."""
    H, W = raster.face.shape
    P = camera.project(mesh)
    r = np.rint(P[:, 0]).astype(np.int64)
    c = np.rint(P[:, 1]).astype(np.int64)
    inb = (r >= 0) & (r < H) & (c >= 0) & (c < W)
    tol = 1.0 / camera.scale if tol is None else tol
    vis = np.zeros(len(P), bool)
    zb = raster.depth[r[inb], c[inb]]
    vis[inb] = P[inb, 2] >= zb - tol
    return vis


def _axis(rng: np.random.Generator, spec) -> np.ndarray:
    a = rng.normal(size=3)
    if spec is None:
        return a / np.linalg.norm(a)
    if spec == "horizontal":
        a[1] = 0.0
        return a / np.linalg.norm(a)
    return np.asarray(spec, dtype=np.float64)


def pose(template: TemplateMesh, rotations: dict[str, tuple]) -> np.ndarray:
    """Apply explicit ``{bone name: (axis, angle in radians)}`` rotations to the rig."""
    rig = getattr(template, "rig", None)
    if rig is None:
        raise ValueError("template has no rig; cannot pose it")
    V = template.vertices.copy()
    eye = np.eye(3)
    for bone in rig.bones:
        if bone.name not in rotations:
            continue
        axis, angle = rotations[bone.name]
        w = bone.weights
        for frac in np.unique(w[w > 0]):
            idx = w == frac
            D = rotation_matrix(axis, frac * angle) - eye
            V[idx] = V[idx] + (V[idx] - bone.pivot) @ D.T
    return V


def deform_template(template: TemplateMesh, seed: int, difficulty: float) -> np.ndarray:
    """Pose the template with seeded random bone rotations.

    Each bone rotates about its rest pivot by an angle drawn uniformly from
    ``[-1, 1] * difficulty * max_angle``; per-vertex weights give the fraction
    of the angle applied, which blends joints over the rings next to them.
    Bones are applied deepest first so parents carry their children.
    """
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError(f"difficulty must lie in [0, 1], got {difficulty}")
    rig = getattr(template, "rig", None)
    if rig is None:
        raise ValueError("template has no rig; cannot pose it")
    rng = np.random.default_rng(seed)
    rotations = {}
    for bone in rig.bones:
        axis = _axis(rng, bone.axis)
        rotations[bone.name] = (axis, rng.uniform(-1.0, 1.0) * difficulty * math.radians(bone.max_angle_deg))
    return pose(template, rotations)


def corrupt_iuv(iuv: IuvImage, seed: int, noise_level: float, template: TemplateMesh | None = None) -> IuvImage:
    """Perturb an IUV image the way an imperfect dense-correspondence predictor might.

    Foreground UVs get uniform noise of half-width ``noise_level`` (then clamped);
    a fraction ``noise_level`` of part-boundary pixels switch to a part adjacent
    on the template surface.
    """
    if not 0.0 <= noise_level <= 1.0:
        raise ValueError(f"noise_level must lie in [0, 1], got {noise_level}")
    if noise_level == 0.0:
        return iuv.copy()
    rng = np.random.default_rng(seed)
    H, W = iuv.shape
    part = iuv.part.copy()
    uv = iuv.uv.astype(np.float64)
    fg = part > 0
    noise = rng.uniform(-noise_level, noise_level, size=(H, W, 2))
    uv[fg] = np.clip(uv[fg] + noise[fg], 0.0, 1.0)
    pad = np.pad(iuv.part, 1, mode="edge")
    boundary = np.zeros((H, W), bool)
    for dr, dc in ((0, 1), (2, 1), (1, 0), (1, 2)):
        boundary |= pad[dr : dr + H, dc : dc + W] != iuv.part
    boundary &= fg
    pick = rng.random((H, W))
    choice = rng.random((H, W))
    if template is not None:
        adj = {p: sorted(s) for p, s in template.part_adjacency().items()}
        for r, c in zip(*np.nonzero(boundary & (pick < noise_level))):
            options = adj.get(int(part[r, c]), [])
            if options:
                part[r, c] = options[int(choice[r, c] * len(options))]
    return IuvImage(part, uv)


@dataclass(eq=False)
class Scene:
    gt_mesh: np.ndarray
    image: np.ndarray  # (3, H, W)
    iuv: IuvImage
    camera: Camera
    seed: int
    difficulty: float
    raster: RasterResult | None = None


def make_scene(template: TemplateMesh, seed: int, difficulty: float, H: int, W: int,
               camera: Camera | None = None) -> Scene:
    camera = camera or Camera.fit(H, W)
    mesh = deform_template(template, seed, difficulty)
    raster = rasterize(mesh, template.faces, camera, H, W)
    iuv = iuv_from_raster(raster, template)
    image = synthesize_image(mesh, template, camera, None, H, W, raster=raster)
    return Scene(mesh, image, iuv, camera, seed, difficulty, raster)


def export_scene(scene: Scene, template: TemplateMesh, out_dir: str | os.PathLike) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_tensor(os.path.join(out_dir, "image.mgt"), scene.image)
    save_iuv(os.path.join(out_dir, "iuv.iuv"), scene.iuv)
    export_obj(scene.gt_mesh, template.faces, os.path.join(out_dir, "gt.obj"))
    manifest = {"seed": scene.seed, "difficulty": scene.difficulty, "camera": asdict(scene.camera),
                "height": scene.iuv.height, "width": scene.iuv.width}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
