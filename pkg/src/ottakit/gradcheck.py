"""Central finite-difference oracle for parameter gradients."""

from __future__ import annotations

import numpy as np

# gradients below this magnitude are compared absolutely rather than relatively
REL_FLOOR = 1e-7


def relative_error(analytic, numeric, floor: float = REL_FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grads(loss_fn, params: dict, step: float = 1e-5) -> dict:
    """Central differences of the scalar ``loss_fn(params)`` for every entry."""
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    out = {}
    for name, arr in work.items():
        g = np.empty_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            fp = float(loss_fn(work))
            flat[i] = keep - step
            fm = float(loss_fn(work))
            flat[i] = keep
            gflat[i] = (fp - fm) / (2.0 * step)
        out[name] = g
    return out


def max_relative_error(analytic: dict, numeric: dict, floor: float = REL_FLOOR) -> float:
    return max(float(relative_error(analytic[k], numeric[k], floor).max()) for k in numeric)
