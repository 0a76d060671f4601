"""Initial designs over a box: uniform random and Latin Hypercube."""

from __future__ import annotations

import numpy as np


def _check_box(bounds) -> np.ndarray:
    bounds = np.atleast_2d(np.asarray(bounds, dtype=np.float64))
    if bounds.ndim != 2 or bounds.shape[1] != 2:
        raise ValueError(f"bounds must have shape (d, 2), got {bounds.shape}")
    if np.any(bounds[:, 0] >= bounds[:, 1]):
        raise ValueError("empty box: every lower bound must be below its upper bound")
    return bounds


def uniform_sample(bounds, n: int, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. uniform points in the box, shape (n, d)."""
    bounds = _check_box(bounds)
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = bounds[:, 0], bounds[:, 1]
    return lo + (hi - lo) * rng.random((n, bounds.shape[0]))


def lhs_sample(bounds, n: int, rng: np.random.Generator) -> np.ndarray:
    """Latin Hypercube design: one point per equal-width bin in every dimension."""
    bounds = _check_box(bounds)
    if n < 1:
        raise ValueError("n must be >= 1")
    d = bounds.shape[0]
    bins = np.stack([rng.permutation(n) for _ in range(d)], axis=1)
    u = (bins + rng.random((n, d))) / n
    lo, hi = bounds[:, 0], bounds[:, 1]
    return lo + (hi - lo) * u


def sample_size(d: int, multiplier: int) -> int:
    if d < 1 or multiplier < 1:
        raise ValueError("d and multiplier must be positive")
    return multiplier * d
