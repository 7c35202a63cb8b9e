"""Central finite differences, used as the independent gradient oracle."""

from __future__ import annotations

from typing import Callable

import numpy as np


def finite_diff(f: Callable[[np.ndarray], float], x, step: float = 1e-5, coords=None) -> np.ndarray:
    """Estimate the gradient of scalar ``f`` at ``x`` by central differences.

    ``f`` receives a float64 array shaped like ``x``.  When ``coords`` (flat
    indices) is given only those entries are estimated; the rest stay zero.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size) if coords is None else coords:
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(x))
        flat[i] = orig - step
        lo = float(f(x))
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * step)
    return out.reshape(x.shape)


def rel_err(a, b, floor: float = 1e-10) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||, floor)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
