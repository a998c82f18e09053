"""Convolutional feature pyramid, bilinear sampling and per-vertex feature rows.

Row layout of the vertex feature matrix (``D`` = sum of all stage channels)::

    [stage1 | stage2 | stage3 | stage4 | global | c_row, c_col | x, y, z]

``feature_layout`` returns the slice of every block. Absent vertices have
zeros in the four local blocks and in the two ``c`` slots.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .correspondence import CorrespondenceSet
from .mesh import TemplateMesh


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    input_size: int = 56
    channels: tuple[int, ...] = (8, 16, 32, 64, 128)
    kernel: int = 3
    stride: int = 2

    def __post_init__(self):
        if len(self.channels) != 5:
            raise ValueError(f"expected 5 stage channel counts, got {len(self.channels)}")
        if min(self.channels) < 1 or self.input_size < 1:
            raise ValueError("channels and input size must be positive")
        sizes = self.stage_sizes
        if not all(a > b for a, b in zip(sizes, sizes[1:])) or sizes[-1] < 1:
            raise ValueError(f"stage sizes must strictly decrease to >= 1, got {sizes}")

    @property
    def stage_sizes(self) -> tuple[int, ...]:
        """Spatial size of the four local stages."""
        out, n = [], self.input_size
        for _ in range(4):
            n = ad.conv_output_size(n, self.kernel, self.stride, self.kernel // 2)
            out.append(n)
        return tuple(out)

    @property
    def feature_dim(self) -> int:
        return int(sum(self.channels))

    @property
    def row_width(self) -> int:
        return self.feature_dim + 5

    @classmethod
    def desk(cls) -> BackboneConfig:
        return cls()

    @classmethod
    def full_scale(cls) -> BackboneConfig:
        return cls(3, 224, (64, 256, 512, 1024, 2048))


def feature_layout(channels) -> dict[str, slice]:
    """Column slices of each block in a vertex feature row."""
    out, at = {}, 0
    for l, c in enumerate(channels[:4], start=1):
        out[f"stage{l}"] = slice(at, at + c)
        at += c
    out["global"] = slice(at, at + channels[4])
    at += channels[4]
    out["pixel"] = slice(at, at + 2)
    out["tpose"] = slice(at + 2, at + 5)
    out["local"] = slice(0, out["global"].start)
    return out


@dataclass(eq=False)
class FeaturePyramid:
    stages: list  # four C_l x S_l x S_l tensors
    global_feature: Tensor  # (C_5,)
    input_size: tuple[int, int]

    def __post_init__(self):
        if len(self.stages) != 4:
            raise ShapeError(f"expected 4 spatial stages, got {len(self.stages)}")
        sizes = [s.shape[1] for s in self.stages]
        if any(s.ndim != 3 or s.shape[1] != s.shape[2] for s in self.stages):
            raise ShapeError("stage maps must be C x S x S")
        if not all(a > b for a, b in zip(sizes, sizes[1:])) or sizes[-1] < 1:
            raise ShapeError(f"stage sizes must strictly decrease, got {sizes}")
        if self.global_feature.ndim != 1:
            raise ShapeError(f"global feature must be a vector, got {self.global_feature.shape}")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(s.shape[0] for s in self.stages) + (self.global_feature.shape[0],)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(s.shape[1] for s in self.stages)

    @property
    def feature_dim(self) -> int:
        return int(sum(self.channels))


class Backbone:
    """Plain five-stage stack of strided 3x3 convolutions with ReLU.

    Stages one to four are the local maps; stage five is convolved, rectified
    and average-pooled into the global vector.
    """

    def __init__(self, config: BackboneConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_backbone(config, seed)

    def __call__(self, image) -> FeaturePyramid:
        return backbone_forward(image, self.params, self.config)


def init_backbone(config: BackboneConfig, seed: int = 0) -> dict[str, Tensor]:
    """Glorot-uniform kernels and zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    params, cin, k = {}, config.in_channels, config.kernel
    for l, cout in enumerate(config.channels, start=1):
        bound = np.sqrt(6.0 / ((cin + cout) * k * k))
        params[f"backbone.stage{l}.conv.weight"] = ad.parameter(
            rng.uniform(-bound, bound, (cout, cin, k, k)), f"backbone.stage{l}.conv.weight")
        params[f"backbone.stage{l}.conv.bias"] = ad.parameter(np.zeros(cout), f"backbone.stage{l}.conv.bias")
        cin = cout
    return params


def backbone_forward(image, params: dict[str, Tensor], config: BackboneConfig) -> FeaturePyramid:
    x = ad.as_tensor(image)
    n = config.input_size
    if x.shape != (config.in_channels, n, n):
        raise ShapeError(f"expected input {(config.in_channels, n, n)}, got {x.shape}")
    stages, pad = [], config.kernel // 2
    for l in range(1, 6):
        x = ad.relu(ad.conv2d(x, params[f"backbone.stage{l}.conv.weight"],
                              params[f"backbone.stage{l}.conv.bias"], stride=config.stride, pad=pad))
        if l < 5:
            stages.append(x)
    return FeaturePyramid(stages, ad.global_avg_pool(x), (n, n))


# ---------------------------------------------------------------------------
# sampling

def bilinear_weights(points, input_size, map_size: int):
    """Corner texel indices and weights for continuous pixel ``points``.

    ``points`` is ``(N, 2)`` of ``(row, col)`` in input-image pixel coordinates
    (pixel centres at integers). Grid coordinates follow the align-corners-false
    rule ``(p + 0.5) * S / H - 0.5``, clamped to the map. Returns ``idx`` of shape
    ``(N, 4)`` into the row-major flattened map and matching ``w`` summing to 1.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    H, W = input_size
    lo = np.array([-0.5, -0.5])
    hi = np.array([H - 0.5, W - 0.5])
    if not np.all(np.isfinite(p)) or np.any(p < lo) or np.any(p > hi):
        raise ValueError("sample point outside the input image")
    S = map_size
    g = (p + 0.5) * np.array([S / H, S / W]) - 0.5
    g = np.clip(g, 0.0, S - 1.0)
    i0 = np.floor(g).astype(np.int64)
    i1 = np.minimum(i0 + 1, S - 1)
    f = g - i0
    fr, fc = f[:, 0], f[:, 1]
    idx = np.stack([i0[:, 0] * S + i0[:, 1], i0[:, 0] * S + i1[:, 1],
                    i1[:, 0] * S + i0[:, 1], i1[:, 0] * S + i1[:, 1]], axis=1)
    w = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], axis=1)
    return idx, w


def sample_points(fmap, points, input_size) -> Tensor:
    """Bilinearly sample a ``C x S x S`` map at ``(N, 2)`` points; returns ``N x C``."""
    fmap = ad.as_tensor(fmap)
    if fmap.ndim != 3 or fmap.shape[1] != fmap.shape[2]:
        raise ShapeError(f"expected a C x S x S map, got {fmap.shape}")
    C, S, _ = fmap.shape
    idx, w = bilinear_weights(points, input_size, S)
    flat = ad.transpose(ad.reshape(fmap, (C, S * S)))
    out = None
    for c in range(4):
        term = ad.row_scale(ad.gather_rows(flat, idx[:, c]), w[:, c])
        out = term if out is None else out + term
    return out


def bilinear_sample(fmap, point, input_size) -> Tensor:
    """Single-point form of :func:`sample_points`; returns a ``C`` vector."""
    return sample_points(fmap, np.asarray(point, dtype=np.float64).reshape(1, 2), input_size)[0]


# ---------------------------------------------------------------------------
# vertex feature rows

def _global_and_tpose(pyramid: FeaturePyramid, template: TemplateMesh):
    n = template.num_vertices
    g = ad.gather_rows(ad.reshape(pyramid.global_feature, (1, -1)), np.zeros(n, np.int64))
    return g, Tensor(template.vertices)


def assemble_vertex_features(pyramid: FeaturePyramid, corr: CorrespondenceSet, template: TemplateMesh) -> Tensor:
    """``N_v x (D + 5)`` vertex feature matrix from sampled local and global features."""
    n = template.num_vertices
    if corr.num_vertices != n:
        raise ShapeError(f"correspondence has {corr.num_vertices} vertices, template has {n}")
    H, W = pyramid.input_size
    present = np.flatnonzero(corr.present)
    pts = (corr.pixel[present] - 1).astype(np.float64)
    blocks = []
    for fmap in pyramid.stages:
        C = fmap.shape[0]
        if len(present) == 0:
            blocks.append(Tensor(np.zeros((n, C))))
            continue
        sampled = sample_points(fmap, pts, (H, W))
        # scatter present rows into a zero matrix; absent rows stay exactly zero
        blocks.append(ad.segment_sum(sampled, present, n))
    g, tpose = _global_and_tpose(pyramid, template)
    pix = np.zeros((n, 2))
    pix[present] = corr.pixel[present] / np.array([H, W], dtype=np.float64)
    return ad.concat(blocks + [g, Tensor(pix), tpose], axis=1)


def global_only_features(pyramid: FeaturePyramid, template: TemplateMesh) -> Tensor:
    """Same layout with every local block and pixel slot zero."""
    n = template.num_vertices
    local = sum(pyramid.channels[:4])
    g, tpose = _global_and_tpose(pyramid, template)
    return ad.concat([Tensor(np.zeros((n, local))), g, Tensor(np.zeros((n, 2))), tpose], axis=1)


def vertex_features(pyramid: FeaturePyramid, corr: CorrespondenceSet, template: TemplateMesh,
                    mode: str = "local") -> Tensor:
    if mode == "local":
        return assemble_vertex_features(pyramid, corr, template)
    if mode == "global":
        return global_only_features(pyramid, template)
    raise ValueError(f"unknown feature mode {mode!r}; expected 'local' or 'global'")
