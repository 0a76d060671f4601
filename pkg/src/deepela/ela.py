"""Classical landscape features and feature diagnostics.

Baseline families: dispersion, y-distribution, meta-model fits, fitness
distance correlation and nearest-better clustering. Diagnostics: per-feature
signal-to-noise ratio and group-averaged absolute correlation matrices.
"""

from __future__ import annotations

import csv
import io
import math
import os
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.distance import pdist, squareform
from scipy.stats import kurtosis, skew

from .problem import Sample

DISPERSION_FRACTIONS = (0.02, 0.05, 0.1, 0.25)
SNR_IMPUTE = 1e12
SNR_SIGMA_EPS = 1e-12


def _single_y(sample: Sample) -> np.ndarray:
    if sample.m != 1:
        raise ValueError(f"baseline features need a single objective, got m={sample.m}")
    return sample.Y[:, 0]


def _best_order(y: np.ndarray) -> np.ndarray:
    # ties go to the lower index
    return np.argsort(y, kind="stable")


def ela_dispersion(sample: Sample, fractions: Sequence[float] = DISPERSION_FRACTIONS) -> dict[str, float]:
    """Mean pairwise distance of the best ceil(q n) points relative to all points."""
    y = _single_y(sample)
    n = sample.n
    if n < 2:
        raise ValueError("dispersion needs at least two points")
    order = _best_order(y)
    all_mean = pdist(sample.X).mean()
    out = {}
    for q in fractions:
        k = math.ceil(q * n)
        if k < 2:
            raise ValueError(f"fraction {q} selects {k} point(s) out of n={n}; need at least 2")
        best_mean = pdist(sample.X[order[:k]]).mean()
        tag = f"{q:g}"
        out[f"disp.ratio_mean_{tag}"] = float(best_mean / all_mean)
        out[f"disp.diff_mean_{tag}"] = float(best_mean - all_mean)
    return out


def ela_ydist(sample: Sample) -> dict[str, float]:
    y = _single_y(sample)
    if sample.n < 4:
        raise ValueError("y-distribution features need n >= 4")
    if np.std(y) == 0:
        raise ValueError("y-distribution features undefined for constant y")
    return {"ydist.skewness": float(skew(y)), "ydist.kurtosis": float(kurtosis(y))}


def _adj_r2(A: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    n, p = A.shape
    if np.linalg.matrix_rank(A) < p:
        raise np.linalg.LinAlgError("singular design matrix")
    beta, *_ = np.linalg.lstsq(A, y, rcond=None)
    ss_res = float(np.sum((y - A @ beta) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot
    return 1.0 - (1.0 - r2) * (n - 1) / (n - p), beta


def ela_meta(sample: Sample) -> dict[str, float]:
    """Adjusted R^2 of linear and pure-quadratic least-squares fits, plus coefficient ratios."""
    y = _single_y(sample)
    X = sample.X
    n, d = X.shape
    if n <= 2 * d + 1:
        raise ValueError(f"meta-model fits need n > {2 * d + 1}, got {n}")
    if np.std(y) == 0:
        raise ValueError("meta-model fits undefined for constant y")
    ones = np.ones((n, 1))
    lin_r2, lin_beta = _adj_r2(np.hstack([ones, X]), y)
    quad_r2, quad_beta = _adj_r2(np.hstack([ones, X, X * X]), y)
    lin_abs = np.abs(lin_beta[1:])
    quad_abs = np.abs(quad_beta[1 + d:])
    return {
        "meta.lin_r2": float(lin_r2),
        "meta.quad_r2": float(quad_r2),
        "meta.lin_coef_ratio": float(lin_abs.max() / max(lin_abs.min(), 1e-300)),
        "meta.quad_coef_ratio": float(quad_abs.max() / max(quad_abs.min(), 1e-300)),
    }


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a - a.mean(), b - b.mean()
    da, db = np.sqrt(a @ a), np.sqrt(b @ b)
    if da == 0 or db == 0:
        raise ValueError("correlation undefined for a constant vector")
    return float((a @ b) / (da * db))


def ela_fdc(sample: Sample) -> float:
    """Pearson correlation of (y - y_best) with the distance to the best sampled point."""
    y = _single_y(sample)
    if sample.n < 3:
        raise ValueError("fdc needs n >= 3")
    b = int(_best_order(y)[0])
    dist = np.linalg.norm(sample.X - sample.X[b], axis=1)
    return _pearson(y - y[b], dist)


def ela_nbc(sample: Sample) -> dict[str, float]:
    """Nearest-neighbour versus nearest-better-neighbour distance statistics.

    The best point has no better neighbour; its distance is set to the largest
    nearest-neighbour distance in the sample. Zero-variance ratios and
    correlations resolve to 1 (both spreads zero) or 0 (correlation undefined).
    """
    y = _single_y(sample)
    n = sample.n
    if n < 3:
        raise ValueError("nbc needs n >= 3")
    if np.all(y == y[0]):
        raise ValueError("nbc undefined when all objective values are equal")
    D = squareform(pdist(sample.X))
    np.fill_diagonal(D, np.inf)
    nn = D.min(axis=1)
    better = y[None, :] < y[:, None]
    nb_all = np.where(better, D, np.inf)
    nb = nb_all.min(axis=1)
    nb[~np.isfinite(nb)] = nn.max()
    nn_sd, nb_sd = nn.std(), nb.std()
    if nb_sd == 0:
        sd_ratio = 1.0 if nn_sd == 0 else float("inf")
    else:
        sd_ratio = float(nn_sd / nb_sd)
    mean_ratio = float(nn.mean() / nb.mean()) if nb.mean() > 0 else 1.0
    try:
        cor = _pearson(nb, y)
    except ValueError:
        cor = 0.0
    return {"nbc.nn_nb_mean_ratio": mean_ratio, "nbc.nn_nb_sd_ratio": sd_ratio, "nbc.nb_fitness_cor": cor}


def compute_ela(sample: Sample, fractions: Sequence[float] = DISPERSION_FRACTIONS) -> dict[str, float]:
    out = {}
    out.update(ela_dispersion(sample, fractions))
    out.update(ela_ydist(sample))
    out.update(ela_meta(sample))
    out["fdc.fdc"] = ela_fdc(sample)
    out.update(ela_nbc(sample))
    return out


# --------------------------------------------------------------------------
# diagnostics


def snr(F: np.ndarray) -> np.ndarray:
    """Per column mu^2 / sigma^2 over rows; sigma < 1e-12 is imputed as 1e12."""
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] < 2:
        raise ValueError("snr needs an (instances, features) matrix with at least two rows")
    mu = F.mean(axis=0)
    sigma = F.std(axis=0)
    flat = sigma < SNR_SIGMA_EPS
    safe = np.where(flat, 1.0, sigma)
    return np.where(flat, SNR_IMPUTE, mu * mu / (safe * safe))


def grouped_snr(F: np.ndarray, groups: Sequence) -> np.ndarray:
    """SNR per group of rows (e.g. one (function, dimension) pair), averaged over groups."""
    F = np.asarray(F, dtype=np.float64)
    groups = np.asarray([str(g) for g in groups])
    vals = [snr(F[groups == g]) for g in sorted(set(groups.tolist())) if np.sum(groups == g) >= 2]
    if not vals:
        raise ValueError("no group with at least two rows")
    return np.mean(vals, axis=0)


@dataclass
class CorrReport:
    matrix: np.ndarray
    names: list[str]
    n_groups: int
    skipped: list[str]


def corr_report(F: np.ndarray, groups: Sequence, names: Sequence[str] | None = None) -> CorrReport:
    """Absolute Pearson correlation per group, averaged over groups.

    Groups with fewer than three rows or a constant feature are skipped with
    a warning.
    """
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[1] < 2:
        raise ValueError("corr_report needs at least two features")
    names = list(names) if names is not None else [f"f{i}" for i in range(F.shape[1])]
    keys = [str(g) for g in groups]
    mats, skipped = [], []
    for g in sorted(set(keys)):
        rows = F[[i for i, k in enumerate(keys) if k == g]]
        if rows.shape[0] < 3 or np.any(rows.std(axis=0) == 0):
            skipped.append(g)
            warnings.warn(f"skipping degenerate correlation group {g!r}", RuntimeWarning, stacklevel=2)
            continue
        mats.append(np.abs(np.corrcoef(rows, rowvar=False)))
    if not mats:
        raise ValueError("every group was degenerate")
    return CorrReport(np.mean(mats, axis=0), names, len(mats), skipped)


def _atomic_text(path, text: str) -> None:
    from .model import atomic_write_bytes

    atomic_write_bytes(path, text.encode("utf-8"))


def write_snr_csv(path, names: Sequence[str], values: np.ndarray) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["feature", "snr"])
    for name, v in zip(names, values):
        w.writerow([name, repr(float(v))])
    _atomic_text(path, buf.getvalue())


def write_corr_csv(path, report: CorrReport) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["feature"] + report.names)
    for name, row in zip(report.names, report.matrix):
        w.writerow([name] + [f"{v:.12g}" for v in row])
    _atomic_text(path, buf.getvalue())


def render_heatmap(path, report: CorrReport) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    k = len(report.names)
    size = max(4.0, 0.35 * k)
    fig, ax = plt.subplots(figsize=(size, size))
    im = ax.imshow(report.matrix, vmin=0, vmax=1, cmap="viridis")
    ax.set_xticks(range(k), report.names, rotation=90, fontsize=7)
    ax.set_yticks(range(k), report.names, fontsize=7)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    buf = io.BytesIO()
    # fixed metadata keeps the PNG byte-stable
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    from .model import atomic_write_bytes

    atomic_write_bytes(path, buf.getvalue())


ELA_CSV_FIELDS = ("instance_id", "fid", "dim", "instance_seed", "feature_name", "value")


def write_feature_csv(path, rows: Sequence[tuple]) -> None:
    """Long-format feature table, one (instance, feature) pair per line."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ELA_CSV_FIELDS)
    for r in rows:
        w.writerow(list(r[:-1]) + [repr(float(r[-1]))])
    _atomic_text(path, buf.getvalue())


def read_feature_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def ensure_dir(path) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
