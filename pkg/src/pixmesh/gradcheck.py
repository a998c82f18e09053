"""Central finite-difference check of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import ShapeError, Tensor, backward, zero_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    n_checked: int
    worst_index: tuple[int, int] | None = None  # (tensor position, flat index)


def _scalar(out: Tensor) -> float:
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    return float(out.data.reshape(-1)[0])


def grad_check(
    fn: Callable[..., Tensor],
    point: Sequence[Tensor],
    h: float = 1e-6,
    tol: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-10,
) -> GradCheckReport:
    """Compare reverse-mode and central-difference gradients of ``fn`` at ``point``.

    The discrepancy of a tensor is ``max|g_ad - g_fd| / max(|g_ad|_inf, |g_fd|_inf)``;
    tensors whose gradients are both below ``floor`` count as exact.
    ``max_coords`` checks a seeded random subset of coordinates per tensor.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    zero_grad(point)
    for p in point:
        p.requires_grad = True
    out = fn(*point)
    _scalar(out)
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in point]
    zero_grad(point)

    rng = np.random.default_rng(seed)
    worst, worst_at, n_checked = 0.0, None, 0
    for ti, p in enumerate(point):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.zeros(len(coords))
        for n, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(fn(*point))
            flat[i] = orig - h
            fm = _scalar(fn(*point))
            flat[i] = orig
            numeric[n] = (fp - fm) / (2 * h)
        a = analytic[ti].reshape(-1)[coords]
        n_checked += len(coords)
        scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(numeric), initial=0.0))
        if scale < floor:
            continue
        diff = np.abs(a - numeric)
        rel = float(diff.max() / scale)
        if rel > worst:
            worst, worst_at = rel, (ti, int(coords[int(diff.argmax())]))
    return GradCheckReport(worst, worst <= tol, tol, n_checked, worst_at)
