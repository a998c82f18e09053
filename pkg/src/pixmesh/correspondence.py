"""Dense IUV images and the thresholded nearest-neighbour vertex-to-pixel map.

Pixel locations in a :class:`CorrespondenceSet` are 1-based ``(row, col)``
pairs; everything else in the package uses 0-based pixel indices whose centres
sit at integer coordinates. :func:`to_zero_based` is the single conversion.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .mesh import TemplateMesh

IUV_MAGIC = b"IUV1"


@dataclass(eq=False)
class IuvImage:
    part: np.ndarray  # (H, W) uint8, 0 = background
    uv: np.ndarray  # (H, W, 2) float32 in [0, 1]

    def __post_init__(self):
        self.part = np.asarray(self.part, dtype=np.uint8)
        uv = np.clip(np.asarray(self.uv, dtype=np.float32), 0.0, 1.0)
        if self.part.ndim != 2 or uv.shape != self.part.shape + (2,):
            raise ValueError(f"iuv shapes disagree: part {self.part.shape}, uv {uv.shape}")
        uv[self.part == 0] = 0.0
        self.uv = uv

    @property
    def height(self) -> int:
        return self.part.shape[0]

    @property
    def width(self) -> int:
        return self.part.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.part.shape

    @classmethod
    def empty(cls, H: int, W: int) -> IuvImage:
        return cls(np.zeros((H, W), np.uint8), np.zeros((H, W, 2), np.float32))

    def foreground(self) -> np.ndarray:
        return self.part > 0

    def copy(self) -> IuvImage:
        return IuvImage(self.part.copy(), self.uv.copy())

    def equals(self, other: IuvImage) -> bool:
        return np.array_equal(self.part, other.part) and np.array_equal(self.uv, other.uv)


def encode_iuv(img: IuvImage) -> bytes:
    H, W = img.shape
    head = IUV_MAGIC + struct.pack("<II", H, W)
    return head + img.part.astype("u1").tobytes() + img.uv.astype("<f4").tobytes()


def decode_iuv(buf: bytes) -> IuvImage:
    if buf[:4] != IUV_MAGIC:
        raise ValueError("bad IUV magic")
    H, W = struct.unpack("<II", buf[4:12])
    n = H * W
    if len(buf) != 12 + n + 8 * n:
        raise ValueError(f"IUV payload has {len(buf) - 12} bytes, expected {9 * n}")
    part = np.frombuffer(buf, dtype="u1", count=n, offset=12).reshape(H, W)
    uv = np.frombuffer(buf, dtype="<f4", count=2 * n, offset=12 + n).reshape(H, W, 2)
    return IuvImage(part.copy(), uv.astype(np.float32))


def save_iuv(path: str | os.PathLike, img: IuvImage) -> None:
    with open(path, "wb") as f:
        f.write(encode_iuv(img))


def load_iuv(path: str | os.PathLike) -> IuvImage:
    with open(path, "rb") as f:
        return decode_iuv(f.read())


@dataclass(eq=False)
class CorrespondenceSet:
    pixel: np.ndarray  # (N_v, 2) int64, 1-based (row, col); 0 where absent
    present: np.ndarray  # (N_v,) bool
    distance: np.ndarray  # (N_v,) float64, +inf where absent
    image_size: tuple[int, int]

    @property
    def num_vertices(self) -> int:
        return len(self.present)

    @classmethod
    def absent(cls, n: int, image_size: tuple[int, int]) -> CorrespondenceSet:
        return cls(np.zeros((n, 2), np.int64), np.zeros(n, bool), np.full(n, np.inf), tuple(image_size))

    def equals(self, other: CorrespondenceSet) -> bool:
        return (
            np.array_equal(self.present, other.present)
            and np.array_equal(self.pixel, other.pixel)
            and np.array_equal(self.distance, other.distance)
        )


def to_zero_based(corr: CorrespondenceSet) -> np.ndarray:
    """Continuous 0-based ``(row, col)`` pixel-centre coordinates of every vertex."""
    return (corr.pixel - 1).astype(np.float64)


def _check_parts(iuv: IuvImage, template: TemplateMesh) -> None:
    if iuv.part.size and int(iuv.part.max()) > template.part_count:
        raise ValueError(
            f"IUV image has part id {int(iuv.part.max())} but the template has {template.part_count} parts"
        )


def vertex_to_pixel(iuv: IuvImage, template: TemplateMesh, delta: np.ndarray | None = None) -> CorrespondenceSet:
    """Match every template vertex to its nearest same-part pixel in UV.

    Candidates are pixels carrying the vertex's part id; the match is kept when
    its UV distance is at most ``delta[k]``. Ties go to the first pixel in
    row-major order. Vectorised per part; bit-identical to
    :func:`vertex_to_pixel_scan`.
    """
    _check_parts(iuv, template)
    delta = template.delta if delta is None else np.asarray(delta, dtype=np.float64)
    n = template.num_vertices
    out = CorrespondenceSet.absent(n, iuv.shape)
    flat_part = iuv.part.reshape(-1)
    flat_uv = iuv.uv.reshape(-1, 2).astype(np.float64)
    W = iuv.width
    vpart, vuv = template.vertex_part, template.vertex_uv
    for p in np.unique(vpart):
        pix = np.flatnonzero(flat_part == p)
        if len(pix) == 0:
            continue
        ks = np.flatnonzero(vpart == p)
        cu, cv = flat_uv[pix, 0], flat_uv[pix, 1]
        # chunk vertices to bound memory on large images
        step = max(1, 4_000_000 // len(pix))
        for s in range(0, len(ks), step):
            kk = ks[s:s + step]
            du = cu[None, :] - vuv[kk, 0][:, None]
            dv = cv[None, :] - vuv[kk, 1][:, None]
            d2 = du * du + dv * dv
            best = np.argmin(d2, axis=1)
            dist = np.sqrt(d2[np.arange(len(kk)), best])
            ok = dist <= delta[kk]
            hit = kk[ok]
            lin = pix[best[ok]]
            out.present[hit] = True
            out.pixel[hit, 0] = lin // W + 1
            out.pixel[hit, 1] = lin % W + 1
            out.distance[hit] = dist[ok]
    return out


def vertex_to_pixel_scan(iuv: IuvImage, template: TemplateMesh, delta: np.ndarray | None = None) -> CorrespondenceSet:
    """Reference implementation: an explicit per-vertex scan over all pixels."""
    _check_parts(iuv, template)
    delta = template.delta if delta is None else np.asarray(delta, dtype=np.float64)
    n = template.num_vertices
    out = CorrespondenceSet.absent(n, iuv.shape)
    H, W = iuv.shape
    part = iuv.part.tolist()
    uv = iuv.uv.astype(np.float64).tolist()
    for k in range(n):
        pk = int(template.vertex_part[k])
        uk, vk = float(template.vertex_uv[k, 0]), float(template.vertex_uv[k, 1])
        best, at = np.inf, None
        for i in range(H):
            row_p, row_uv = part[i], uv[i]
            for j in range(W):
                if row_p[j] != pk:
                    continue
                du = row_uv[j][0] - uk
                dv = row_uv[j][1] - vk
                d2 = du * du + dv * dv
                if d2 < best:
                    best, at = d2, (i, j)
        if at is None:
            continue
        dist = float(np.sqrt(best))
        if dist <= delta[k]:
            out.present[k] = True
            out.pixel[k] = (at[0] + 1, at[1] + 1)
            out.distance[k] = dist
    return out


def visibility_mask(corr: CorrespondenceSet) -> np.ndarray:
    return corr.present.copy()
