"""Shared problem and sample containers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np


class EvaluationError(ArithmeticError):
    """Raised when an objective produces non-finite values."""


@dataclass
class ProblemInstance:
    """An evaluatable continuous problem with ``m`` objectives over a box.

    ``objectives`` holds callables mapping an ``(n, d)`` array to an
    ``n``-vector. ``origin`` is a free-form metadata dict, e.g.
    ``{"kind": "random", "seed": 17}`` or ``{"kind": "bbob", "fid": 3}``.
    """

    objectives: Sequence[Callable[[np.ndarray], np.ndarray]]
    bounds: np.ndarray
    origin: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64)
        if self.bounds.ndim != 2 or self.bounds.shape[1] != 2:
            raise ValueError(f"bounds must have shape (d, 2), got {self.bounds.shape}")
        if len(self.objectives) < 1:
            raise ValueError("a problem needs at least one objective")

    @property
    def d(self) -> int:
        return self.bounds.shape[0]

    @property
    def m(self) -> int:
        return len(self.objectives)

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        """Evaluate all objectives, returning an ``(n, m)`` matrix.

        Raises:
            EvaluationError: if any objective value is NaN or infinite.
        """
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.d:
            raise ValueError(f"expected {self.d} columns, got {X.shape[1]}")
        Y = np.column_stack([np.asarray(f(X), dtype=np.float64).reshape(-1) for f in self.objectives])
        if not np.all(np.isfinite(Y)):
            raise EvaluationError("objective returned non-finite values")
        return Y


@dataclass
class Sample:
    """Paired decision matrix ``X`` (n x d) and objective matrix ``Y`` (n x m)."""

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        Y = np.asarray(self.Y, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y[:, None]
        self.Y = Y
        if self.X.shape[0] != self.Y.shape[0]:
            raise ValueError("X and Y must have the same number of rows")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def m(self) -> int:
        return self.Y.shape[1]


def draw_sample(instance: ProblemInstance, X: np.ndarray) -> Sample:
    return Sample(X, instance.evaluate(X))
