"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np

from .exceptions import ShapeError
from .time_embedding import MAX_DELAY_MINUTES


def check_images(X, name: str = "X", allow_single: bool = True) -> np.ndarray:
    """Return a finite float64 ``(n, H, W)`` stack with values in [0, 1]."""
    a = np.asarray(X, dtype=np.float64)
    if a.ndim == 2 and allow_single:
        a = a[None]
    if a.ndim == 4 and a.shape[1] == 1:
        a = a[:, 0]
    if a.ndim != 3 or a.shape[0] == 0:
        raise ShapeError(f"{name} must be a non-empty (n, H, W) image stack, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains NaN or infinite values")
    if a.min() < 0.0 or a.max() > 1.0:
        raise ValueError(f"{name} must be normalized to [0, 1] (range {a.min():.3g}..{a.max():.3g})")
    return a


def check_delays(delays, n: int) -> np.ndarray:
    """Whole-minute delays in [0, 600] broadcast to length ``n``."""
    d = np.asarray(delays, dtype=np.float64)
    if d.ndim == 0:
        d = np.full(n, float(d))
    if d.shape != (n,):
        raise ShapeError(f"expected {n} delays, got shape {d.shape}")
    if not np.all(d == np.round(d)):
        raise ValueError("delays must be whole minutes")
    if d.min() < 0 or d.max() > MAX_DELAY_MINUTES:
        raise ValueError(f"delays must lie in [0, {MAX_DELAY_MINUTES}] minutes")
    return d.astype(np.int64)


def check_pair(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = check_images(X, "X")
    y = check_images(y, "y")
    if X.shape != y.shape:
        raise ShapeError(f"early and delayed stacks differ: {X.shape} vs {y.shape}")
    return X, y
