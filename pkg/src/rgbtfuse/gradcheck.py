"""Central-difference gradient oracle."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward, no_grad


def numerical_grad(f, x: Tensor, coords, eps: float) -> np.ndarray:
    flat = x.data.reshape(-1)
    out = np.empty(len(coords), dtype=np.float64)
    with no_grad():
        for k, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(x).data.sum())
            flat[i] = orig - eps
            fm = float(f(x).data.sum())
            flat[i] = orig
            out[k] = (fp - fm) / (2.0 * eps)
    return out


def plateau_grad(f, x: Tensor, coords, steps) -> np.ndarray:
    """Central differences over a ladder of steps; per coordinate, keep the estimate
    from the adjacent pair of steps that agree best.

    Large steps straddle kinks (ReLU, max, sort order) and small steps drown in
    roundoff; the flat stretch in between is the reliable one.
    """
    est = np.stack([numerical_grad(f, x, coords, h) for h in steps])
    gaps = np.abs(np.diff(est, axis=0))
    best = gaps.argmin(axis=0)
    cols = np.arange(len(coords))
    return 0.5 * (est[best, cols] + est[best + 1, cols])


def grad_check(f, x: Tensor, eps: float = 1e-3, max_coords: int | None = 64, seed: int = 0,
               return_details: bool = False):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps ``x`` to a scalar tensor. ``x`` is perturbed in place, so it may
    equally be a model parameter that ``f`` reads through a closure. Error per
    coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``; large tensors are checked
    on ``max_coords`` randomly chosen coordinates.
    """
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    loss = f(x)
    backward(loss)
    # x unused by f: the analytic gradient is zero
    analytic = (np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).astype(np.float64))
    x.grad = None
    x.requires_grad = was

    n = x.size
    if max_coords is None or n <= max_coords:
        coords = np.arange(n)
    else:
        coords = np.sort(np.random.default_rng(seed).choice(n, size=max_coords, replace=False))
    if np.ndim(eps):
        numeric = plateau_grad(f, x, coords, eps)
    else:
        numeric = numerical_grad(f, x, coords, eps)
    a = analytic[coords]
    err = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    worst = float(err.max()) if err.size else 0.0
    if return_details:
        return worst, {"coords": coords, "analytic": a, "numeric": numeric, "error": err}
    return worst
