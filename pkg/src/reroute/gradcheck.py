"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .tensor import Tensor


def rel_error(analytic: np.ndarray, numeric: np.ndarray, zero_floor: float = 1e-6) -> float:
    """Max elementwise relative error; absolute error where both sides are ~0."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(a), np.abs(n))
    err = np.abs(a - n)
    rel = np.where(denom > zero_floor, err / np.maximum(denom, zero_floor), err)
    # where the true gradient vanishes only the absolute criterion applies
    rel = np.where(denom <= zero_floor, np.where(err < zero_floor, 0.0, err), rel)
    return float(rel.max()) if rel.size else 0.0


def numeric_gradient(f: Callable[[], Tensor], param: Tensor, eps: float = 1e-5,
                     indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central differences of the scalar f() w.r.t. selected flat indices of param."""
    flat = param.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    indices = list(indices)
    out = np.zeros(len(indices))
    for k, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f().item()
        flat[i] = orig - eps
        lo = f().item()
        flat[i] = orig
        out[k] = (hi - lo) / (2 * eps)
    return out


def check_gradients(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5,
                    max_entries_per_param: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> float:
    """Backward-vs-finite-difference comparison; returns the worst relative error.

    Large parameters are probed on a random index subset when
    max_entries_per_param is set.
    """
    params = list(params)
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat_a = analytic.reshape(-1)
        n = flat_a.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            idx = sorted(rng.choice(n, size=max_entries_per_param, replace=False).tolist())
        else:
            idx = list(range(n))
        numeric = numeric_gradient(f, p, eps=eps, indices=idx)
        worst = max(worst, rel_error(flat_a[idx], numeric))
    return worst
