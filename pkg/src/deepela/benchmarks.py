"""BBOB-style single-objective suite, high-level property labels and a ZDT subset.

Function formulas follow the published noiseless BBOB definitions. Instance
construction (rotations, shifts, offsets) is our own seeded approximation and
is not bit-compatible with COCO. ``instance_seed=0`` is the canonical,
untransformed instance: no rotation, zero offset, and the optimum at the
family's natural location (origin for most families, the all-ones point for
Rosenbrock).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

from .problem import ProblemInstance

SUPPORTED_DIMS = (2, 3, 5, 10)
ZDT_IDS = ("zdt1", "zdt2", "zdt3")


class Multimodality(str, Enum):
    NONE = "none"
    LOW = "low"
    MED = "med"
    HIGH = "high"


class GlobalStructure(str, Enum):
    NONE = "none"
    WEAK = "weak"
    MED = "med"
    STRONG = "strong"
    DECEPTIVE = "deceptive"


class Funnel(str, Enum):
    YES = "yes"
    NONE = "none"


class HLPLabel(NamedTuple):
    multimodality: Multimodality
    global_structure: GlobalStructure
    funnel: Funnel


HLP_PROPERTIES = ("multimodality", "global_structure", "funnel")

_M, _G, _F = Multimodality, GlobalStructure, Funnel

# fid -> (name, multimodality, global structure, funnel)
_TABLE = {
    1: ("Sphere", _M.NONE, _G.NONE, _F.YES),
    2: ("Ellipsoidal separable", _M.NONE, _G.NONE, _F.YES),
    3: ("Rastrigin separable", _M.HIGH, _G.STRONG, _F.YES),
    4: ("Bueche-Rastrigin", _M.HIGH, _G.STRONG, _F.YES),
    5: ("Linear Slope", _M.NONE, _G.NONE, _F.YES),
    6: ("Attractive Sector", _M.NONE, _G.NONE, _F.YES),
    7: ("Step Ellipsoidal", _M.NONE, _G.NONE, _F.YES),
    8: ("Rosenbrock", _M.LOW, _G.NONE, _F.YES),
    9: ("Rosenbrock rotated", _M.LOW, _G.NONE, _F.YES),
    10: ("Ellipsoidal high conditioned", _M.NONE, _G.NONE, _F.YES),
    11: ("Discus", _M.NONE, _G.NONE, _F.YES),
    12: ("Bent Cigar", _M.NONE, _G.NONE, _F.YES),
    13: ("Sharp Ridge", _M.NONE, _G.NONE, _F.YES),
    14: ("Different Powers", _M.NONE, _G.NONE, _F.YES),
    15: ("Rastrigin multimodal", _M.HIGH, _G.STRONG, _F.YES),
    16: ("Weierstrass", _M.HIGH, _G.MED, _F.NONE),
    17: ("Schaffer F7", _M.HIGH, _G.MED, _F.YES),
    18: ("Schaffer F7 moderately ill-cond.", _M.HIGH, _G.MED, _F.YES),
    19: ("Griewank-Rosenbrock", _M.HIGH, _G.STRONG, _F.YES),
    20: ("Schwefel", _M.MED, _G.DECEPTIVE, _F.YES),
    21: ("Gallagher 101 Peaks", _M.MED, _G.NONE, _F.NONE),
    22: ("Gallagher 21 Peaks", _M.LOW, _G.NONE, _F.NONE),
    23: ("Katsuura", _M.HIGH, _G.NONE, _F.NONE),
    24: ("Lunacek bi-Rastrigin", _M.HIGH, _G.WEAK, _F.YES),
}

# fid groups used for the selection report rows
FUNCTION_GROUPS = {1: range(1, 6), 2: range(6, 10), 3: range(10, 15), 4: range(15, 20), 5: range(20, 25)}


def function_group(fid: int) -> int:
    for group, fids in FUNCTION_GROUPS.items():
        if fid in fids:
            return group
    raise KeyError(f"unknown fid {fid}")


def function_name(fid: int) -> str:
    if fid not in _TABLE:
        raise KeyError(f"fid must be in 1..24, got {fid}")
    return _TABLE[fid][0]


def hlp_labels(fid: int) -> HLPLabel:
    """High-level property labels of a BBOB function."""
    if fid not in _TABLE:
        raise KeyError(f"fid must be in 1..24, got {fid}")
    _, mm, gs, fu = _TABLE[fid]
    return HLPLabel(mm, gs, fu)


def write_suite_csv(path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["fid", "name", "multimodality", "global_structure", "funnel"])
        for fid, (name, mm, gs, fu) in _TABLE.items():
            w.writerow([fid, name, mm.value, gs.value, fu.value])


# --------------------------------------------------------------------------
# transformations


def t_osz(x: np.ndarray) -> np.ndarray:
    x_hat = np.where(x == 0, 0.0, np.log(np.abs(np.where(x == 0, 1.0, x))))
    c1 = np.where(x > 0, 10.0, 5.5)
    c2 = np.where(x > 0, 7.9, 3.1)
    return np.sign(x) * np.exp(x_hat + 0.049 * (np.sin(c1 * x_hat) + np.sin(c2 * x_hat)))


def t_asy(x: np.ndarray, beta: float) -> np.ndarray:
    d = x.shape[-1]
    ramp = np.arange(d) / (d - 1)
    pos = np.where(x > 0, x, 0.0)
    return np.where(x > 0, pos ** (1 + beta * ramp * np.sqrt(pos)), x)


def lambda_diag(alpha: float, d: int) -> np.ndarray:
    return alpha ** (0.5 * np.arange(d) / (d - 1))


def f_pen(x: np.ndarray) -> np.ndarray:
    return np.sum(np.maximum(0.0, np.abs(x) - 5.0) ** 2, axis=-1)


def random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal matrix from the QR decomposition of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def _rot(X: np.ndarray, R: np.ndarray) -> np.ndarray:
    # row-wise R @ x
    return X @ R.T


# --------------------------------------------------------------------------
# function families; each takes (X, inst) with X of shape (n, d)


def _sphere(X, p):
    return np.sum((X - p.x_opt) ** 2, axis=1)


def _ellipsoid_sep(X, p):
    d = p.d
    z = t_osz(X - p.x_opt)
    return np.sum(10 ** (6 * np.arange(d) / (d - 1)) * z**2, axis=1)


def _rastrigin_sum(z):
    d = z.shape[1]
    return 10 * (d - np.sum(np.cos(2 * np.pi * z), axis=1)) + np.sum(z**2, axis=1)


def _rastrigin_sep(X, p):
    z = lambda_diag(10, p.d) * t_asy(t_osz(X - p.x_opt), 0.2)
    return _rastrigin_sum(z)


def _bueche_rastrigin(X, p):
    d = p.d
    z = t_osz(X - p.x_opt)
    base = 10 ** (0.5 * np.arange(d) / (d - 1))
    odd = (np.arange(d) % 2) == 0  # 1-based odd positions
    s = np.where((z > 0) & odd, 10 * base, base)
    return _rastrigin_sum(s * z) + 100 * f_pen(X)


def _linear_slope(X, p):
    d = p.d
    s = np.sign(p.x_opt) * 10 ** (np.arange(d) / (d - 1))
    z = np.where(p.x_opt * X < 25, X, p.x_opt)
    return np.sum(5 * np.abs(s) - s * z, axis=1)


def _attractive_sector(X, p):
    z = _rot(lambda_diag(10, p.d) * _rot(X - p.x_opt, p.R), p.Q)
    s = np.where(z * p.x_opt > 0, 100.0, 1.0)
    return t_osz(np.sum((s * z) ** 2, axis=1)) ** 0.9


def _step_ellipsoid(X, p):
    d = p.d
    z_hat = lambda_diag(10, d) * _rot(X - p.x_opt, p.R)
    z_tilde = np.where(np.abs(z_hat) > 0.5, np.floor(0.5 + z_hat), np.floor(0.5 + 10 * z_hat) / 10)
    z = _rot(z_tilde, p.Q)
    body = np.sum(10 ** (2 * np.arange(d) / (d - 1)) * z**2, axis=1)
    return 0.1 * np.maximum(np.abs(z_hat[:, 0]) / 1e4, body) + f_pen(X)


def _rosenbrock_sum(z):
    return np.sum(100 * (z[:, :-1] ** 2 - z[:, 1:]) ** 2 + (z[:, :-1] - 1) ** 2, axis=1)


def _rosenbrock(X, p):
    z = max(1.0, np.sqrt(p.d) / 8) * (X - p.x_opt) + 1
    return _rosenbrock_sum(z)


def _rosenbrock_rot(X, p):
    z = max(1.0, np.sqrt(p.d) / 8) * _rot(X, p.R) + 0.5
    return _rosenbrock_sum(z)


def _ellipsoid_rot(X, p):
    d = p.d
    z = t_osz(_rot(X - p.x_opt, p.R))
    return np.sum(10 ** (6 * np.arange(d) / (d - 1)) * z**2, axis=1)


def _discus(X, p):
    z = t_osz(_rot(X - p.x_opt, p.R))
    return 1e6 * z[:, 0] ** 2 + np.sum(z[:, 1:] ** 2, axis=1)


def _bent_cigar(X, p):
    z = _rot(t_asy(_rot(X - p.x_opt, p.R), 0.5), p.R)
    return z[:, 0] ** 2 + 1e6 * np.sum(z[:, 1:] ** 2, axis=1)


def _sharp_ridge(X, p):
    z = _rot(lambda_diag(10, p.d) * _rot(X - p.x_opt, p.R), p.Q)
    return z[:, 0] ** 2 + 100 * np.sqrt(np.sum(z[:, 1:] ** 2, axis=1))


def _different_powers(X, p):
    d = p.d
    z = _rot(X - p.x_opt, p.R)
    return np.sqrt(np.sum(np.abs(z) ** (2 + 4 * np.arange(d) / (d - 1)), axis=1))


def _rastrigin_rot(X, p):
    z = t_asy(t_osz(_rot(X - p.x_opt, p.R)), 0.2)
    z = _rot(lambda_diag(10, p.d) * _rot(z, p.Q), p.R)
    return _rastrigin_sum(z)


_W_K = 0.5 ** np.arange(12)
_W_3K = 3.0 ** np.arange(12)
_W_F0 = float(np.sum(_W_K * np.cos(np.pi * _W_3K)))


def _weierstrass(X, p):
    d = p.d
    z = t_osz(_rot(X - p.x_opt, p.R))
    z = _rot(lambda_diag(0.01, d) * _rot(z, p.Q), p.R)
    inner = np.sum(_W_K * np.cos(2 * np.pi * _W_3K * (z[:, :, None] + 0.5)), axis=2)
    return 10 * (np.sum(inner, axis=1) / d - _W_F0) ** 3 + 10 / d * f_pen(X)


def _schaffer(X, p, cond):
    d = p.d
    z = lambda_diag(cond, d) * _rot(t_asy(_rot(X - p.x_opt, p.R), 0.5), p.Q)
    s = np.sqrt(z[:, :-1] ** 2 + z[:, 1:] ** 2)
    body = np.sum(np.sqrt(s) + np.sqrt(s) * np.sin(50 * s**0.2) ** 2, axis=1) / (d - 1)
    return body**2 + 10 * f_pen(X)


def _griewank_rosenbrock(X, p):
    d = p.d
    z = max(1.0, np.sqrt(d) / 8) * _rot(X, p.R) + 0.5
    s = 100 * (z[:, :-1] ** 2 - z[:, 1:]) ** 2 + (z[:, :-1] - 1) ** 2
    return 10 / (d - 1) * np.sum(s / 4000 - np.cos(s), axis=1) + 10


def _schwefel(X, p):
    d = p.d
    sign = np.sign(p.x_opt)
    x_hat = 2 * sign * X
    z_hat = x_hat.copy()
    z_hat[:, 1:] += 0.25 * (x_hat[:, :-1] - 2 * np.abs(p.x_opt[:-1]))
    z = 100 * (lambda_diag(10, d) * (z_hat - 2 * np.abs(p.x_opt)) + 2 * np.abs(p.x_opt))
    return -np.sum(z * np.sin(np.sqrt(np.abs(z))), axis=1) / (100 * d) + 4.189828872724339 + 100 * f_pen(z / 100)


def _gallagher(X, p):
    d = p.d
    best = np.full(X.shape[0], -np.inf)
    for w, y, c in zip(p.peak_w, p.peak_y, p.peak_c):
        r = _rot(X - y, p.R)
        q = np.sum(c * r**2, axis=1)
        best = np.maximum(best, w * np.exp(-q / (2 * d)))
    return t_osz(10 - best) ** 2 + f_pen(X)


def _katsuura(X, p):
    d = p.d
    z = _rot(lambda_diag(100, d) * _rot(X - p.x_opt, p.R), p.Q)
    two_j = 2.0 ** np.arange(1, 33)
    zj = z[:, :, None] * two_j
    inner = np.sum(np.abs(zj - np.round(zj)) / two_j, axis=2)
    prod = np.prod((1 + np.arange(1, d + 1) * inner) ** (10 / d**1.2), axis=1)
    return 10 / d**2 * prod - 10 / d**2 + f_pen(X)


def _lunacek(X, p):
    d = p.d
    mu0 = 2.5
    s = 1 - 1 / (2 * np.sqrt(d + 20) - 8.2)
    mu1 = -np.sqrt((mu0**2 - 1) / s)
    x_hat = 2 * np.sign(p.x_opt) * X
    z = _rot(lambda_diag(100, d) * _rot(x_hat - mu0, p.R), p.Q)
    s1 = np.sum((x_hat - mu0) ** 2, axis=1)
    s2 = d + s * np.sum((x_hat - mu1) ** 2, axis=1)
    return np.minimum(s1, s2) + 10 * (d - np.sum(np.cos(2 * np.pi * z), axis=1)) + 1e4 * f_pen(X)


_FAMILIES = {
    1: _sphere, 2: _ellipsoid_sep, 3: _rastrigin_sep, 4: _bueche_rastrigin, 5: _linear_slope,
    6: _attractive_sector, 7: _step_ellipsoid, 8: _rosenbrock, 9: _rosenbrock_rot,
    10: _ellipsoid_rot, 11: _discus, 12: _bent_cigar, 13: _sharp_ridge, 14: _different_powers,
    15: _rastrigin_rot, 16: _weierstrass,
    17: lambda X, p: _schaffer(X, p, 10.0),
    18: lambda X, p: _schaffer(X, p, 1000.0),
    19: _griewank_rosenbrock, 20: _schwefel, 21: _gallagher, 22: _gallagher,
    23: _katsuura, 24: _lunacek,
}


@dataclass(frozen=True)
class BenchmarkId:
    fid: int | str
    instance_seed: int = 0


class BBOBFunction:
    """Callable objective for one (fid, instance_seed, d) triple."""

    def __init__(self, fid: int, instance_seed: int, d: int):
        if fid not in _FAMILIES:
            raise KeyError(f"unknown fid {fid}")
        if d not in SUPPORTED_DIMS:
            raise ValueError(f"d must be one of {SUPPORTED_DIMS}, got {d}")
        self.fid, self.instance_seed, self.d = fid, instance_seed, d
        rng = np.random.default_rng([fid, instance_seed, d])
        canonical = instance_seed == 0
        if canonical:
            self.R = np.eye(d)
            self.Q = np.eye(d)
            self.f_opt = 0.0
            x_opt = np.zeros(d)
        else:
            self.R = random_rotation(d, rng)
            self.Q = random_rotation(d, rng)
            self.f_opt = float(np.clip(np.round(100 * rng.standard_cauchy()) / 100, -1000, 1000))
            x_opt = rng.uniform(-4, 4, size=d)
        signs = np.where(x_opt >= 0, 1.0, -1.0) if not canonical else np.ones(d)
        if fid == 5:
            x_opt = 5 * signs
        elif fid == 8:
            x_opt = np.ones(d) if canonical else 0.75 * x_opt
        elif fid in (9, 19):
            c = max(1.0, np.sqrt(d) / 8)
            x_opt = self.R.T @ np.full(d, 0.5 / c)
        elif fid == 20:
            x_opt = 4.2096874633 / 2 * signs
        elif fid == 24:
            x_opt = 2.5 / 2 * signs
        elif fid == 22:
            x_opt = 3.92 / 4 * x_opt
        self.x_opt = x_opt
        if fid in (21, 22):
            self._init_gallagher(rng, 101 if fid == 21 else 21)

    def _init_gallagher(self, rng: np.random.Generator, n_peaks: int):
        d = self.d
        w = np.empty(n_peaks)
        w[0] = 10.0
        w[1:] = 1.1 + 8 * np.arange(n_peaks - 1) / (n_peaks - 2)
        alphas = 1000.0 ** (2 * np.arange(n_peaks - 1) / (n_peaks - 2))
        alphas = np.concatenate([[1000.0 if n_peaks == 101 else 1000.0**2], rng.permutation(alphas)])
        c = np.stack([rng.permutation(lambda_diag(a, d)) / a**0.25 for a in alphas])
        span = 5.0 if n_peaks == 101 else 4.9
        y = rng.uniform(-span, span, size=(n_peaks, d))
        y[0] = self.x_opt
        self.peak_w, self.peak_y, self.peak_c = w, y, c

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        with np.errstate(over="ignore", invalid="ignore"):
            return _FAMILIES[self.fid](X, self) + self.f_opt

    def __repr__(self):
        return f"BBOBFunction(fid={self.fid}, instance_seed={self.instance_seed}, d={self.d})"


def _zdt_g(u: np.ndarray) -> np.ndarray:
    d = u.shape[1]
    return 1 + 9 / (d - 1) * np.sum(u[:, 1:], axis=1)


class ZDTObjective:
    """One objective of ZDT1-3, with [-5, 5] mapped onto the unit box."""

    def __init__(self, name: str, index: int):
        if name not in ZDT_IDS:
            raise KeyError(f"unknown ZDT problem {name!r}")
        self.name, self.index = name, index

    def __call__(self, X: np.ndarray) -> np.ndarray:
        u = (np.atleast_2d(X) + 5.0) / 10.0
        f1 = u[:, 0]
        if self.index == 0:
            return f1.copy()
        g = _zdt_g(u)
        r = f1 / g
        if self.name == "zdt1":
            h = 1 - np.sqrt(r)
        elif self.name == "zdt2":
            h = 1 - r**2
        else:
            h = 1 - np.sqrt(r) - r * np.sin(10 * np.pi * f1)
        return g * h


def make_benchmark(id: BenchmarkId, d: int) -> ProblemInstance:
    """Build a benchmark instance on the [-5, 5]^d box.

    Raises:
        KeyError: unknown function id.
        ValueError: unsupported dimensionality.
    """
    if isinstance(id.fid, str):
        if id.fid not in ZDT_IDS:
            raise KeyError(f"unknown suite tag {id.fid!r}")
        if d != 2:
            raise ValueError("the ZDT subset is provided for d=2 only")
        objectives = [ZDTObjective(id.fid, 0), ZDTObjective(id.fid, 1)]
        origin = {"kind": "zdt", "fid": id.fid, "instance_seed": id.instance_seed}
    else:
        f = BBOBFunction(int(id.fid), id.instance_seed, d)
        objectives = [f]
        origin = {"kind": "bbob", "fid": f.fid, "instance_seed": id.instance_seed,
                  "x_opt": f.x_opt, "f_opt": f.f_opt}
    return ProblemInstance(objectives=objectives, bounds=np.tile([-5.0, 5.0], (d, 1)), origin=origin)


def bbob(fid: int, instance_seed: int, d: int) -> ProblemInstance:
    return make_benchmark(BenchmarkId(fid, instance_seed), d)
