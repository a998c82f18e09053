"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a tape node holding the parents and a closure mapping the
output gradient to parent gradients. :func:`backward` walks the tape once in
reverse topological order and accumulates gradients into leaf tensors.

Broadcasting is deliberately narrow: two operands must have equal shapes, one
of them must be a scalar, or the lower-rank shape must equal the trailing
axes of the higher-rank one. Size-1 expansion is rejected.
"""
from __future__ import annotations

import contextlib
import logging
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

_DEFAULT_DTYPE = np.float64
_STRICT = False


class ShapeError(ValueError):
    """Operand shapes do not conform to the operation."""


class NonFiniteError(ValueError):
    """A non-finite scalar reached an operation while strict mode is on."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_strict(flag: bool) -> None:
    global _STRICT
    _STRICT = bool(flag)


def is_strict() -> bool:
    return _STRICT


@contextlib.contextmanager
def strict_mode(flag: bool = True):
    prev = _STRICT
    set_strict(flag)
    try:
        yield
    finally:
        set_strict(prev)


class _Node:
    __slots__ = ("parents", "backward_fn", "op")

    def __init__(self, parents, backward_fn, op):
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op


class Tensor:
    """Dense array with an optional gradient accumulator and tape node."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if _STRICT and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor{' ' + name if name else ''}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"tensor of shape {self.shape} is not scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracks(*ts: Tensor) -> bool:
    return any(t.requires_grad or t._node is not None for t in ts)


def _check_inputs(*arrays: np.ndarray) -> None:
    if _STRICT:
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise NonFiniteError("non-finite input scalar rejected in strict mode")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.name = None
    out._node = _Node(tuple(parents), backward_fn, op) if _tracks(*parents) else None
    return out


# ---------------------------------------------------------------------------
# broadcasting

def broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    if a == b:
        return a
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if len(a) > len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"shape mismatch: {a} vs {b}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum(), dtype=grad.dtype)
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------------------
# element-wise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    _check_inputs(a.data, b.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    _check_inputs(a.data, b.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    _check_inputs(a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    _check_inputs(a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    _check_inputs(a.data)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a) -> Tensor:
    a = as_tensor(a)
    _check_inputs(a.data)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def tabs(a) -> Tensor:
    """Absolute value; subgradient 0 at 0."""
    a = as_tensor(a)
    _check_inputs(a.data)
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def relu(a) -> Tensor:
    a = as_tensor(a)
    _check_inputs(a.data)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0).astype(a.data.dtype), (a,), lambda g: (g * mask,), "relu")


def row_scale(x, w) -> Tensor:
    """Multiply row ``i`` of ``x`` by ``w[i]``. ``w`` has shape ``(x.shape[0],)``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 1 or x.ndim < 1 or x.shape[0] != w.shape[0]:
        raise ShapeError(f"shape mismatch: {x.shape} vs {w.shape} (row_scale)")
    xd, wd = x.data, w.data
    wb = wd.reshape((-1,) + (1,) * (xd.ndim - 1))

    def bw(g):
        gw = (g * xd).reshape(g.shape[0], -1).sum(axis=1)
        return g * wb, gw

    return _make(xd * wb, (x, w), bw, "row_scale")


# ---------------------------------------------------------------------------
# reductions and shape manipulation

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand_to(g: np.ndarray, shape, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    full = list(shape)
    for ax in axis:
        full[ax] = 1
    return np.broadcast_to(g.reshape(full), shape)


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=ax))
    return _make(out, (a,), lambda g: (np.array(_expand_to(g, shape, ax)),), "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    n = a.size if ax is None else int(np.prod([a.shape[i] for i in ax]))
    return scale(tsum(a, axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"shape mismatch: cannot reshape {old} to {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.data.dtype
    out = a.data[key]

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, key, g) if _is_fancy(key) else full.__setitem__(key, g)
        return (full,)

    return _make(np.array(out), (a,), bw, "getitem")


def _is_fancy(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of zero tensors")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"shape mismatch: {ts[0].shape} vs {t.shape} (concat axis {axis})")
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, bw, "concat")


def split(a, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    a = as_tensor(a)
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax]:
        raise ShapeError(f"shape mismatch: split sizes {list(sizes)} vs extent {a.shape[ax]}")
    out, start = [], 0
    for n in sizes:
        idx = [slice(None)] * a.ndim
        idx[ax] = slice(start, start + n)
        out.append(getitem(a, tuple(idx)))
        start += n
    return out


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape} (matmul)")
    _check_inputs(a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), bw, "matmul")


def dot(a, b, axis: int = -1) -> Tensor:
    """Inner product along ``axis``; for 1-D inputs this is a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape} (dot)")
    return tsum(mul(a, b), axis=axis)


def norm_l1(a, axis=-1) -> Tensor:
    return tsum(tabs(a), axis=axis)


def norm_l2(a, axis=-1, eps: float = 0.0) -> Tensor:
    """Euclidean norm along ``axis``. Gradient at a zero vector is zero."""
    a = as_tensor(a)
    _check_inputs(a.data)
    ax = _norm_axis(axis, a.ndim)
    ad = a.data
    out = np.sqrt((ad * ad).sum(axis=ax))
    shape = a.shape

    def bw(g):
        denom = _expand_to(out, shape, ax)
        safe = np.where(denom > eps, denom, 1.0)
        grad = np.where(denom > eps, ad / safe, 0.0)
        return (grad * _expand_to(g, shape, ax),)

    return _make(np.asarray(out), (a,), bw, "norm_l2")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_inputs(a.data)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


# ---------------------------------------------------------------------------
# indexed / sparse operations

def _scatter_rows(idx: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + values.shape[1:], dtype=values.dtype)
    np.add.at(out, idx, values)
    return out


def gather_rows(a, idx) -> Tensor:
    """Rows ``a[idx]``; repeated indices accumulate in the backward pass."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"gather index out of range for shape {a.shape}")
    return _make(a.data[idx], (a,), lambda g: (_scatter_rows(idx, g, n),), "gather_rows")


def segment_sum(a, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets given by ``segment_ids``."""
    a = as_tensor(a)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape != a.shape[:1]:
        raise ShapeError(f"shape mismatch: {a.shape} vs segment ids {seg.shape}")
    return _make(_scatter_rows(seg, a.data, num_segments), (a,), lambda g: (g[seg],), "segment_sum")


def segment_softmax(logits, segment_ids, num_segments: int) -> Tensor:
    """Softmax of ``logits`` within each segment (rows sharing an id)."""
    x = as_tensor(logits)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape != x.shape[:1]:
        raise ShapeError(f"shape mismatch: {x.shape} vs segment ids {seg.shape}")
    _check_inputs(x.data)
    xd = x.data
    mx = np.full((num_segments,) + xd.shape[1:], -np.inf, dtype=xd.dtype)
    np.maximum.at(mx, seg, xd)
    e = np.exp(xd - mx[seg])
    s = _scatter_rows(seg, e, num_segments)
    out = e / s[seg]

    def bw(g):
        inner = _scatter_rows(seg, g * out, num_segments)
        return (out * (g - inner[seg]),)

    return _make(out, (x,), bw, "segment_softmax")


def spmm(values, rows, cols, num_rows: int, x) -> Tensor:
    """Sparse-dense product ``A @ x`` where ``A[rows[e], cols[e]] = values[e]``."""
    v, x = as_tensor(values), as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if v.shape != rows.shape or rows.shape != cols.shape or x.ndim != 2:
        raise ShapeError(f"shape mismatch: values {v.shape} vs x {x.shape} (spmm)")
    _check_inputs(v.data, x.data)
    A = sp.csr_matrix((v.data, (rows, cols)), shape=(num_rows, x.shape[0]))
    xd = x.data

    def bw(g):
        gv = np.einsum("ec,ec->e", g[rows], xd[cols])
        return gv, np.asarray(A.T @ g)

    return _make(np.asarray(A @ xd), (v, x), bw, "spmm")


# ---------------------------------------------------------------------------
# convolution and pooling

def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of a ``C x H x W`` map with an ``O x C x kh x kw`` kernel."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 4 or x.shape[0] != w.shape[1]:
        raise ShapeError(f"shape mismatch: input {x.shape} vs kernel {w.shape} (conv2d)")
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"shape mismatch: bias {b.shape} vs kernel {w.shape} (conv2d)")
        parents.append(b)
    _check_inputs(x.data, w.data)
    C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho, Wo = conv_output_size(H, kh, stride, pad), conv_output_size(W, kw, stride, pad)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"shape mismatch: input {x.shape} too small for kernel {w.shape}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, -1)
    out = (cols @ wmat.T).T.reshape(O, Ho, Wo)
    if b is not None:
        out = out + b.data[:, None, None]

    def bw(g):
        g2 = g.reshape(O, Ho * Wo)
        gw = (g2 @ cols).reshape(w.shape)
        dcols = (g2.T @ wmat).reshape(Ho, Wo, C, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[:, :, :, i, j].transpose(2, 0, 1)
        gx = dxp[:, pad : pad + H, pad : pad + W]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    return _make(out, parents, bw, "conv2d")


def global_avg_pool(x) -> Tensor:
    """Mean over the spatial axes of a ``C x H x W`` map."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"shape mismatch: expected C x H x W, got {x.shape}")
    return mean(x, axis=(1, 2))


# ---------------------------------------------------------------------------
# reverse pass

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if id(p) not in seen and (p._node is not None or p.requires_grad):
                    stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(leaf) into every reachable leaf requiring grad.

    Returns a map from leaf tensor to the gradient contributed by this call.
    Gradients accumulate across calls until reset with :func:`zero_grad`.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if root._node is None:
        if not root.requires_grad:
            logger.warning("backward called on a tensor with no tape; nothing to do")
            return {}
        contrib = {root: np.ones_like(root.data)}
        root.grad = contrib[root] if root.grad is None else root.grad + contrib[root]
        return contrib
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for t in reversed(_topo_order(root)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._node is None:
            if t.requires_grad:
                leaves[t] = g
            continue
        pgrads = t._node.backward_fn(g)
        for p, pg in zip(t._node.parents, pgrads):
            if pg is None or (p._node is None and not p.requires_grad):
                continue
            pg = np.asarray(pg, dtype=p.data.dtype).reshape(p.shape)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    for leaf, g in leaves.items():
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return leaves


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)
