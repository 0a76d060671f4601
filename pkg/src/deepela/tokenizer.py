"""Turn a sample (X, Y) into a set of kNN tokens.

Pipeline: per-column z-standardization of X and Y, zero padding of both to
``nu`` columns, concatenation into an ``n x 2nu`` matrix, and for every
point the concatenation of its own row with the offsets to its ``k - 1``
nearest neighbours (searched in the standardized decision columns only).
An optional stride then drops tokens; it runs after the embedding so that
dropped points still show up as neighbours.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problem import Sample

STD_EPS = 1e-8


class DimensionalityError(ValueError):
    """Raised when d + m exceeds the model's degree of dimensionality."""


@dataclass
class TokenSet:
    tokens: np.ndarray
    d: int
    m: int
    k: int
    nu: int
    stride: int
    n_original: int

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


def standardize(M: np.ndarray) -> np.ndarray:
    """Column-wise z-score with population std; near-constant columns become zeros."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] < 2:
        raise ValueError("standardize needs a 2-D matrix with at least two rows")
    centered = M - M.mean(axis=0)
    std = centered.std(axis=0)
    safe = std > STD_EPS
    return np.where(safe, centered / np.where(safe, std, 1.0), 0.0)


def pad_and_concat(Xs: np.ndarray, Ys: np.ndarray, nu: int) -> np.ndarray:
    n, d = Xs.shape
    m = Ys.shape[1]
    if m < 1 or d < 1:
        raise DimensionalityError("need at least one decision and one objective column")
    if d + m > nu:
        raise DimensionalityError(f"d + m = {d + m} exceeds the degree of dimensionality nu = {nu}")
    out = np.zeros((n, 2 * nu))
    out[:, :d] = Xs
    out[:, nu:nu + m] = Ys
    return out


def neighbour_indices(P: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k - 1`` nearest other points per row, nearest first.

    Ties in distance go to the smaller index (stable sort on index order).
    """
    # explicit differences keep duplicate points at exactly zero distance
    D = np.sum((P[:, None, :] - P[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(D, np.inf)
    order = np.argsort(D, axis=1, kind="stable")
    return order[:, : k - 1]


def knn_embed(T: np.ndarray, k: int, nu: int | None = None) -> np.ndarray:
    """Return the ``n x 2k nu`` token matrix for the padded matrix ``T``."""
    n, width = T.shape
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    nu = width // 2 if nu is None else nu
    if k == 1:
        return T.copy()
    nbr = neighbour_indices(T[:, :nu], k)
    offsets = T[nbr] - T[:, None, :]
    return np.concatenate([T, offsets.reshape(n, -1)], axis=1)


def apply_stride(ts: TokenSet, s: int) -> TokenSet:
    if s < 1:
        raise ValueError("stride must be >= 1")
    return TokenSet(ts.tokens[::s], ts.d, ts.m, ts.k, ts.nu, ts.stride * s, ts.n_original)


def tokenize(sample: Sample, k: int, nu: int, stride: int = 1) -> TokenSet:
    Xs = standardize(sample.X)
    Ys = standardize(sample.Y)
    T = pad_and_concat(Xs, Ys, nu)
    tokens = knn_embed(T, k, nu)
    ts = TokenSet(tokens, sample.d, sample.m, k, nu, 1, sample.n)
    return apply_stride(ts, stride) if stride != 1 else ts


def write_matrix(path, M: np.ndarray) -> None:
    np.savetxt(path, M, fmt="%.12g")


def read_matrix(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, dtype=np.float64))
