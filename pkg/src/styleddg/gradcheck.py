"""Central finite differences and the relative-error measure used by gradient checks."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

FD_STEP = 1e-5
# Central differences at FD_STEP carry ~eps * |f| / step ~ 1e-11 of absolute
# round-off.  Coordinates whose gradient is below this floor are therefore
# judged on absolute error (tol * floor) instead of a ratio of noise terms.
REL_FLOOR = 1e-6


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = FD_STEP, coords: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (optionally on selected flat coords only)."""
    x = np.array(x, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    out = np.full(flat.shape, np.nan) if coords is not None else np.zeros(flat.shape)
    for i in range(flat.size) if coords is None else coords:
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * step)
    return out.reshape(x.shape)


def rel_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    a, n = np.asarray(analytic, dtype=float), np.asarray(numeric, dtype=float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def max_rel_error(analytic, numeric, floor: float = REL_FLOOR) -> float:
    e = rel_errors(analytic, numeric, floor)
    e = e[~np.isnan(e)]
    return float(e.max()) if e.size else 0.0
