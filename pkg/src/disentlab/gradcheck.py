"""Central finite-difference check of tape gradients.

The analytic pass runs in float32 as in training; the numeric pass promotes
every checked tensor (and every tensor created during re-evaluation) to
float64 so the oracle does not inherit float32 rounding.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, precision


def numeric_gradient(fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-6,
                     max_elems: int | None = None, rng: np.random.Generator | None = None):
    """Return ``[(flat_indices, numeric_grads)]`` per tensor."""
    saved = [t.data for t in tensors]
    rng = rng or np.random.default_rng(0)
    out = []
    try:
        for t in tensors:
            t.data = t.data.astype(np.float64)
        with precision(np.float64):
            for t in tensors:
                flat = t.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_elems is not None and flat.size > max_elems:
                    idx = np.sort(rng.choice(flat.size, max_elems, replace=False))
                vals = np.empty(len(idx))
                for n, i in enumerate(idx):
                    orig = flat[i]
                    flat[i] = orig + eps
                    hi = float(fn().data.reshape(-1)[0])
                    flat[i] = orig - eps
                    lo = float(fn().data.reshape(-1)[0])
                    flat[i] = orig
                    vals[n] = (hi - lo) / (2 * eps)
                out.append((idx, vals))
    finally:
        for t, d in zip(tensors, saved):
            t.data = d
    return out


def analytic_gradient(fn: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    flags = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    grads = backward(fn())
    result = [np.asarray(grads.get(t, np.zeros_like(t.data)), dtype=np.float64) for t in tensors]
    for t, f in zip(tensors, flags):
        t.requires_grad = f
        t.grad = None
    return result


def gradcheck(fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-6,
              floor: float = 1e-3, max_elems: int | None = None, seed: int = 0) -> float:
    """Largest elementwise relative error between analytic and numeric gradients.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    gradients that are zero in exact arithmetic from dividing by noise.
    """
    analytic = analytic_gradient(fn, tensors)
    numeric = numeric_gradient(fn, tensors, eps, max_elems, np.random.default_rng(seed))
    worst = 0.0
    for a, (idx, n) in zip(analytic, numeric):
        a = a.reshape(-1)[idx]
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(rel.max(initial=0.0)))
    return worst
