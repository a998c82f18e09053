"""Graph convolutional vertex regressor over the fixed template connectivity.

Each semantic graph convolution learns one logit per nonzero entry of
``A + I``; a softmax over every vertex's closed neighbourhood turns the logits
into aggregation weights. The network is a per-vertex input projection,
residual blocks of two such layers, and a per-vertex linear head to 3-D.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .mesh import unique_edges


@dataclass(frozen=True, eq=False)
class GraphPattern:
    """Sparsity of ``A + I`` as COO entries sorted by ``(row, col)``."""

    rows: np.ndarray
    cols: np.ndarray
    num_nodes: int

    @classmethod
    def from_edges(cls, edges, num_nodes: int) -> GraphPattern:
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= num_nodes):
            raise ValueError("edge endpoint out of range")
        loops = np.arange(num_nodes)
        r = np.concatenate([e[:, 0], e[:, 1], loops])
        c = np.concatenate([e[:, 1], e[:, 0], loops])
        key = np.unique(r * num_nodes + c)
        return cls(key // num_nodes, key % num_nodes, num_nodes)

    @classmethod
    def from_faces(cls, faces, num_nodes: int) -> GraphPattern:
        return cls.from_edges(unique_edges(faces), num_nodes)

    @property
    def num_entries(self) -> int:
        return len(self.rows)

    def index(self) -> dict[tuple[int, int], int]:
        return {(int(r), int(c)): e for e, (r, c) in enumerate(zip(self.rows, self.cols))}

    def kipf_values(self) -> np.ndarray:
        """Entries of ``D^-1/2 (A + I) D^-1/2`` in pattern order."""
        deg = np.bincount(self.rows, minlength=self.num_nodes).astype(np.float64)
        return 1.0 / np.sqrt(deg[self.rows] * deg[self.cols])


def semgconv_forward(x, weight, bias, edge_logits, pattern: GraphPattern) -> Tensor:
    """One semantic graph convolution.

    ``edge_logits`` has shape ``(E,)`` (shared across channels) or
    ``(E, C_out)`` (one attention map per output channel).
    """
    x = ad.as_tensor(x)
    if x.ndim != 2 or x.shape[0] != pattern.num_nodes:
        raise ShapeError(f"features {x.shape} do not match a {pattern.num_nodes}-node pattern")
    logits = ad.as_tensor(edge_logits)
    if logits.shape[0] != pattern.num_entries:
        raise ShapeError(f"{logits.shape[0]} edge logits for {pattern.num_entries} pattern entries")
    h = ad.matmul(x, weight)
    alpha = ad.segment_softmax(logits, pattern.rows, pattern.num_nodes)
    if alpha.ndim == 1:
        out = ad.spmm(alpha, pattern.rows, pattern.cols, pattern.num_nodes, h)
    else:
        msg = ad.mul(ad.gather_rows(h, pattern.cols), alpha)
        out = ad.segment_sum(msg, pattern.rows, pattern.num_nodes)
    return out + bias if bias is not None else out


def kipf_forward(x, weight, bias, pattern: GraphPattern) -> Tensor:
    """Fixed symmetric-normalised aggregation, the non-learnable baseline."""
    x = ad.as_tensor(x)
    if x.ndim != 2 or x.shape[0] != pattern.num_nodes:
        raise ShapeError(f"features {x.shape} do not match a {pattern.num_nodes}-node pattern")
    h = ad.matmul(x, weight)
    out = ad.spmm(Tensor(pattern.kipf_values()), pattern.rows, pattern.cols, pattern.num_nodes, h)
    return out + bias if bias is not None else out


@dataclass(frozen=True)
class GraphNetConfig:
    in_dim: int
    hidden: int = 64
    blocks: int = 4
    out_dim: int = 3
    per_channel_logits: bool = False
    conv: str = "semantic"  # or "kipf"
    offset_mode: bool = False  # predict displacement from the T-pose

    def __post_init__(self):
        if self.conv not in ("semantic", "kipf"):
            raise ValueError(f"unknown graph convolution {self.conv!r}")
        if min(self.in_dim, self.hidden, self.out_dim) < 1 or self.blocks < 0:
            raise ValueError("graph net dimensions must be positive")


def init_graphnet(config: GraphNetConfig, pattern: GraphPattern, seed: int = 0,
                  zero_head: bool = False) -> dict[str, Tensor]:
    """Glorot-uniform weights, zero logits and biases; deterministic per seed."""
    rng = np.random.default_rng(seed)

    def glorot(cin, cout):
        b = np.sqrt(6.0 / (cin + cout))
        return rng.uniform(-b, b, (cin, cout))

    p: dict[str, np.ndarray] = {}
    p["gcn.input.weight"] = glorot(config.in_dim, config.hidden)
    p["gcn.input.bias"] = np.zeros(config.hidden)
    for b in range(config.blocks):
        for l in range(2):
            key = f"gcn.block{b}.layer{l}"
            p[f"{key}.weight"] = glorot(config.hidden, config.hidden)
            p[f"{key}.bias"] = np.zeros(config.hidden)
            if config.conv == "semantic":
                shape = (pattern.num_entries, config.hidden) if config.per_channel_logits else (pattern.num_entries,)
                p[f"{key}.edge_logits"] = np.zeros(shape)
    head = glorot(config.hidden, config.out_dim)
    p["gcn.head.weight"] = np.zeros_like(head) if zero_head else head
    p["gcn.head.bias"] = np.zeros(config.out_dim)
    return {k: ad.parameter(v, k) for k, v in p.items()}


class GraphNet:
    def __init__(self, config: GraphNetConfig, pattern: GraphPattern, params: dict[str, Tensor] | None = None,
                 seed: int = 0, tpose: np.ndarray | None = None):
        self.config = config
        self.pattern = pattern
        self.params = params if params is not None else init_graphnet(config, pattern, seed)
        self.tpose = tpose
        if config.offset_mode and tpose is None:
            raise ValueError("offset mode needs the template T-pose")

    def _layer(self, h, key):
        p = self.params
        if self.config.conv == "kipf":
            return kipf_forward(h, p[f"{key}.weight"], p[f"{key}.bias"], self.pattern)
        return semgconv_forward(h, p[f"{key}.weight"], p[f"{key}.bias"], p[f"{key}.edge_logits"], self.pattern)

    def __call__(self, features) -> Tensor:
        return gcn_forward(features, self)


def gcn_forward(features, net: GraphNet) -> Tensor:
    x = ad.as_tensor(features)
    cfg, p = net.config, net.params
    if x.ndim != 2 or x.shape[1] != cfg.in_dim:
        raise ShapeError(f"feature width {x.shape[-1]} does not match network input {cfg.in_dim}")
    h = ad.relu(ad.matmul(x, p["gcn.input.weight"]) + p["gcn.input.bias"])
    for b in range(cfg.blocks):
        y = ad.relu(net._layer(h, f"gcn.block{b}.layer0"))
        y = net._layer(y, f"gcn.block{b}.layer1")
        h = ad.relu(h + y)
    out = ad.matmul(h, p["gcn.head.weight"]) + p["gcn.head.bias"]
    if cfg.offset_mode:
        out = out + Tensor(net.tpose)
    return out
