"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(fn: Callable[[], Tensor], wrt: Tensor, eps: float = 1e-5, max_entries: int | None = None,
                 rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(indices, grads)`` of d fn / d wrt by central differences.

    When ``max_entries`` is set only a random subset of flat indices is probed.
    """
    flat = wrt.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
    out = np.empty(idx.size)
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn().item()
        flat[i] = orig - eps
        down = fn().item()
        flat[i] = orig
        out[j] = (up - down) / (2.0 * eps)
    return idx, out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``.

    The floor keeps gradients that are identically zero in exact arithmetic
    (for example a bias feeding only a shift-invariant op) from reporting
    a relative error of 1 against finite-difference round-off.
    """
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                    max_entries: int | None = 40, seed: int = 0) -> dict[int, float]:
    """Compare backward() against central differences for every tensor in ``params``.

    Returns the relative error per parameter position.
    """
    for p in params:
        p.grad = None
    fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    errors = {}
    for k, p in enumerate(params):
        idx, num = numeric_grad(fn, p, eps=eps, max_entries=max_entries, rng=rng)
        errors[k] = relative_error(analytic[k].reshape(-1)[idx], num)
    return errors
