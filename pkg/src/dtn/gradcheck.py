"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(f: Callable[[], Tensor], arr: np.ndarray, indices, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr`` at ``indices`` (mutated, then restored)."""
    out = np.empty(len(indices))
    for k, idx in enumerate(indices):
        orig = arr[idx]
        arr[idx] = orig + eps
        fp = f().item()
        arr[idx] = orig - eps
        fm = f().item()
        arr[idx] = orig
        out[k] = (fp - fm) / (2 * eps)
    return out


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def gradcheck(
    f: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
) -> float:
    """Largest relative error between analytic and numeric gradients.

    ``f`` must rebuild its graph on every call. With ``max_entries`` only a
    random subset of each tensor's entries is probed. ``floor`` bounds the
    denominator so that gradients which are zero by construction (a bias
    feeding a train-mode batch norm) compare as zero rather than as noise.
    """
    for t in tensors:
        t.grad = None
    backward(f())
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t, g in zip(tensors, analytic):
        flat = list(np.ndindex(t.shape))
        if max_entries is not None and len(flat) > max_entries:
            pick = rng.choice(len(flat), size=max_entries, replace=False)
            flat = [flat[i] for i in sorted(pick)]
        num = numerical_grad(f, t.data, flat, eps)
        ana = np.array([g[idx] for idx in flat])
        worst = max(worst, rel_error(ana, num, floor))
        t.grad = None
    return worst
