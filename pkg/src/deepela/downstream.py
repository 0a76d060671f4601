"""Downstream evaluation: feature extraction over benchmark suites, kNN
classification of high-level properties, Pareto utilities, hypervolume and
algorithm-selection scores (relERT, relHV) over ingested performance tables.
"""

from __future__ import annotations

import csv
import io
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .benchmarks import HLP_PROPERTIES, BenchmarkId, function_group, hlp_labels, make_benchmark
from .ela import compute_ela
from .model import DeepELA, atomic_write_bytes, forward_features
from .problem import EvaluationError, Sample
from .sampling import lhs_sample, uniform_sample
from .tokenizer import tokenize

SAMPLERS = {"lhs": lhs_sample, "uniform": uniform_sample}
RELHV_EPS = 1e-8


def instance_key(fid, seed: int, dim: int) -> str:
    return f"{fid}_{seed}_{dim}"


_KEY_RE = re.compile(r"^(?P<fid>[^_]+)_(?P<seed>-?\d+)_(?P<dim>\d+)$")


def parse_instance_key(key: str) -> tuple[str, int, int] | None:
    m = _KEY_RE.match(key)
    if m is None:
        return None
    return m.group("fid"), int(m.group("seed")), int(m.group("dim"))


# --------------------------------------------------------------------------
# feature datasets


@dataclass
class FeatureDataset:
    keys: list[str]
    fids: list[int]
    dims: list[int]
    seeds: list[int]
    reps: list[int]
    X: np.ndarray
    source: str
    names: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.keys)

    def subset(self, mask) -> "FeatureDataset":
        idx = np.flatnonzero(np.asarray(mask))
        pick = lambda seq: [seq[i] for i in idx]  # noqa: E731
        return FeatureDataset(pick(self.keys), pick(self.fids), pick(self.dims), pick(self.seeds),
                              pick(self.reps), self.X[idx], self.source, list(self.names), list(self.skipped))


def extract_features(model: DeepELA | None, fids: Iterable[int], instance_seeds: Iterable[int],
                     dims: Iterable[int], multiplier: int = 50, repetitions: int = 1, seed: int = 0,
                     sampler: str = "lhs", source: str = "deep") -> FeatureDataset:
    """Sample every (fid, instance seed, dim, repetition) and compute deep or classical features.

    Instances violating the model's dimensional limit (d + 1 > nu) or whose
    evaluation fails are skipped and listed in ``skipped``.
    """
    if source not in ("deep", "ela"):
        raise ValueError("source must be 'deep' or 'ela'")
    if source == "deep" and model is None:
        raise ValueError("deep features need a model")
    draw = SAMPLERS[sampler]
    keys, fl, dl, sl, rl, samples = [], [], [], [], [], []
    skipped = []
    for d in dims:
        for fid in fids:
            for s in instance_seeds:
                for r in range(repetitions):
                    key = instance_key(fid, s, d)
                    if source == "deep" and d + 1 > model.cfg.nu:
                        skipped.append(f"{key}: d + m = {d + 1} exceeds nu = {model.cfg.nu}")
                        continue
                    inst = make_benchmark(BenchmarkId(fid, s), d)
                    rng = np.random.default_rng([seed, fid, s, d, r])
                    X = draw(inst.bounds, multiplier * d, rng)
                    try:
                        samples.append(Sample(X, inst.evaluate(X)))
                    except EvaluationError as exc:
                        skipped.append(f"{key}: {exc}")
                        continue
                    keys.append(key)
                    fl.append(fid)
                    dl.append(d)
                    sl.append(s)
                    rl.append(r)
    if source == "deep":
        cfg = model.cfg
        tss = []
        for smp in samples:
            tss.append(tokenize(smp, cfg.k, cfg.nu, cfg.stride))
        X = np.asarray(forward_features(model, tss), dtype=np.float64) if tss else np.zeros((0, cfg.n_feat))
        names = [f"deep_{i}" for i in range(cfg.n_feat)]
    else:
        rows = [compute_ela(smp) for smp in samples]
        names = list(rows[0]) if rows else []
        X = np.array([[r[n] for n in names] for r in rows], dtype=np.float64).reshape(len(rows), len(names))
    return FeatureDataset(keys, fl, dl, sl, rl, X, source, names, skipped)


# --------------------------------------------------------------------------
# classification


def knn_classify(train_X: np.ndarray, train_y: Sequence, test_X: np.ndarray, k: int) -> list:
    """Euclidean k-nearest-neighbour majority vote.

    Vote ties go to the label with the smaller summed neighbour distance, then
    to the lexicographically smaller label. Neighbour ties go to the lower
    training index.
    """
    train_X = np.atleast_2d(np.asarray(train_X, dtype=np.float64))
    test_X = np.atleast_2d(np.asarray(test_X, dtype=np.float64))
    train_y = list(train_y)
    if len(train_y) == 0:
        raise ValueError("empty training set")
    if not 1 <= k <= len(train_y):
        raise ValueError(f"k={k} must lie in [1, {len(train_y)}]")
    D = np.sqrt(np.maximum(
        (test_X ** 2).sum(1)[:, None] + (train_X ** 2).sum(1)[None, :] - 2 * test_X @ train_X.T, 0.0))
    out = []
    for row in D:
        nbrs = np.argsort(row, kind="stable")[:k]
        votes: dict = defaultdict(lambda: [0, 0.0])
        for i in nbrs:
            v = votes[train_y[i]]
            v[0] += 1
            v[1] += row[i]
        out.append(min(votes, key=lambda lab: (-votes[lab][0], votes[lab][1], str(lab))))
    return out


def macro_f1(predictions: Sequence, labels: Sequence) -> float:
    """Unweighted mean of per-class F1 over the classes present in ``labels``."""
    predictions, labels = list(predictions), list(labels)
    if len(predictions) != len(labels):
        raise ValueError("predictions and labels differ in length")
    if not labels:
        raise ValueError("empty input")
    scores = []
    for c in sorted(set(labels), key=str):
        tp = sum(p == c and t == c for p, t in zip(predictions, labels))
        fp = sum(p == c and t != c for p, t in zip(predictions, labels))
        fn = sum(p != c and t == c for p, t in zip(predictions, labels))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def majority_baseline_f1(train_labels: Sequence, test_labels: Sequence) -> float:
    """Macro-F1 of always predicting the most frequent training label."""
    counts = Counter(train_labels)
    top = min(counts, key=lambda c: (-counts[c], str(c)))
    return macro_f1([top] * len(test_labels), test_labels)


def property_labels(fids: Sequence[int], prop: str) -> list[str]:
    if prop not in HLP_PROPERTIES:
        raise ValueError(f"unknown property {prop!r}")
    return [getattr(hlp_labels(f), prop).value for f in fids]


@dataclass
class HLPResult:
    prop: str
    dim: int
    f1: float
    baseline: float
    n_train: int
    n_test: int


def hlp_experiment(train: FeatureDataset, test: FeatureDataset, k: int = 5,
                   properties: Sequence[str] = HLP_PROPERTIES, standardize: bool = True) -> list[HLPResult]:
    """One kNN classifier per property and dimension; macro-F1 on the test set."""
    results = []
    for d in sorted(set(test.dims)):
        tr = train.subset(np.array(train.dims) == d)
        te = test.subset(np.array(test.dims) == d)
        if len(tr) == 0 or len(te) == 0:
            continue
        Xtr, Xte = tr.X, te.X
        if standardize:
            mu, sd = Xtr.mean(axis=0), Xtr.std(axis=0)
            sd = np.where(sd > 0, sd, 1.0)
            Xtr, Xte = (Xtr - mu) / sd, (Xte - mu) / sd
        for prop in properties:
            ytr, yte = property_labels(tr.fids, prop), property_labels(te.fids, prop)
            pred = knn_classify(Xtr, ytr, Xte, min(k, len(ytr)))
            results.append(HLPResult(prop, d, macro_f1(pred, yte), majority_baseline_f1(ytr, yte),
                                     len(ytr), len(yte)))
    return results


def write_hlp_csv(path, results: Sequence[HLPResult]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["property", "dim", "macro_f1", "majority_baseline", "n_train", "n_test"])
    for r in results:
        w.writerow([r.prop, r.dim, f"{r.f1:.12g}", f"{r.baseline:.12g}", r.n_train, r.n_test])
    atomic_write_bytes(path, buf.getvalue().encode())


# --------------------------------------------------------------------------
# Pareto utilities and hypervolume


def pareto_dominates(a, b) -> bool:
    """True iff ``a`` is no worse than ``b`` everywhere and strictly better somewhere (minimization)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("objective vectors differ in length")
    return bool(np.all(a <= b) and np.any(a < b))


def pareto_front(points) -> np.ndarray:
    """Non-dominated rows (first occurrence of duplicates kept once), in input order."""
    P = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = P.shape[0]
    if n == 0:
        return P
    le = np.all(P[:, None, :] <= P[None, :, :], axis=2)
    lt = np.any(P[:, None, :] < P[None, :, :], axis=2)
    dominated = np.any(le & lt, axis=0)
    keep = []
    seen = set()
    for i in range(n):
        if dominated[i]:
            continue
        key = tuple(P[i])
        if key in seen:
            continue
        seen.add(key)
        keep.append(i)
    return P[keep]


def hypervolume_2d(front, ref) -> float:
    """Area dominated by ``front`` and bounded by ``ref`` (bi-objective minimization)."""
    P = np.atleast_2d(np.asarray(front, dtype=np.float64))
    ref = np.asarray(ref, dtype=np.float64)
    if P.shape[1] != 2 or ref.shape != (2,):
        raise ValueError("hypervolume_2d needs two objectives")
    if P.shape[0] == 0:
        return 0.0
    if not np.all(P < ref):
        raise ValueError("every front point must strictly dominate the reference point")
    F = pareto_front(P)
    F = F[np.lexsort((F[:, 1], F[:, 0]))]
    hv, prev_y = 0.0, ref[1]
    for x, y in F:
        hv += (ref[0] - x) * (prev_y - y)
        prev_y = y
    return float(hv)


# --------------------------------------------------------------------------
# performance tables and selection scores

PERF_FIELDS = ("instance_key", "algorithm", "repetition", "metric", "value")


@dataclass
class PerfRecord:
    instance_key: str
    algorithm: str
    repetition: int
    metric: str
    value: float


@dataclass
class PerfTable:
    records: list[PerfRecord]
    metric: str

    def __post_init__(self):
        if self.metric not in ("ert", "hv"):
            raise ValueError("metric must be 'ert' or 'hv'")
        for r in self.records:
            if r.metric != self.metric:
                raise ValueError(f"record metric {r.metric!r} differs from table metric {self.metric!r}")
            if self.metric == "ert" and not r.value > 0:
                raise ValueError(f"ERT must be positive ({r.instance_key}, {r.algorithm})")
            if self.metric == "hv" and not r.value >= 0:
                raise ValueError(f"HV must be non-negative ({r.instance_key}, {r.algorithm})")

    @property
    def algorithms(self) -> list[str]:
        return sorted({r.algorithm for r in self.records})

    @property
    def instances(self) -> list[str]:
        return sorted({r.instance_key for r in self.records})

    def matrix(self) -> dict[str, dict[str, float]]:
        """Mean value over repetitions per instance and algorithm."""
        acc: dict = defaultdict(lambda: defaultdict(list))
        for r in self.records:
            acc[r.instance_key][r.algorithm].append(r.value)
        out = {k: {a: float(np.mean(v)) for a, v in d.items()} for k, d in acc.items()}
        algs = self.algorithms
        for k, row in out.items():
            missing = [a for a in algs if a not in row]
            if missing:
                raise ValueError(f"instance {k!r} lacks records for {missing}")
        return out


def read_perf_csv(path, failure_penalty: float | None = None) -> PerfTable:
    """Read a PerfTable; empty, nan or inf ERT values become ``failure_penalty`` if given."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != PERF_FIELDS:
            raise ValueError(f"perf CSV header must be {','.join(PERF_FIELDS)}")
        for line in reader:
            raw = line["value"].strip()
            val = float(raw) if raw else float("nan")
            if not math.isfinite(val):
                if failure_penalty is None or line["metric"] != "ert":
                    raise ValueError(f"non-finite value for {line['instance_key']}/{line['algorithm']}")
                val = failure_penalty
            records.append(PerfRecord(line["instance_key"], line["algorithm"], int(line["repetition"]),
                                      line["metric"], val))
    metrics = {r.metric for r in records}
    if len(metrics) != 1:
        raise ValueError(f"perf table must hold exactly one metric, found {sorted(metrics)}")
    return PerfTable(records, metrics.pop())


def write_perf_csv(path, table: PerfTable) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PERF_FIELDS)
    for r in table.records:
        w.writerow([r.instance_key, r.algorithm, r.repetition, r.metric, repr(float(r.value))])
    atomic_write_bytes(path, buf.getvalue().encode())


def relert(ert: float, ert_vbs: float, sample_cost: float = 0.0) -> float:
    """(ERT + sample cost) / ERT of the virtual best solver."""
    if ert_vbs <= 0:
        raise ValueError("VBS ERT must be positive")
    return (ert + sample_cost) / ert_vbs


def relhv(hv: float, hv_sbs: float, hv_vbs: float) -> float:
    """(hv - hv_sbs + 1e-8) / (hv_vbs - hv_sbs + 1e-8)."""
    if hv_vbs < hv_sbs:
        raise ValueError("VBS hypervolume below SBS hypervolume")
    return (hv - hv_sbs + RELHV_EPS) / (hv_vbs - hv_sbs + RELHV_EPS)


def _best_algorithm(row: dict[str, float], metric: str) -> str:
    sign = 1.0 if metric == "ert" else -1.0
    return min(row, key=lambda a: (sign * row[a], a))


def single_best(matrix: dict[str, dict[str, float]], keys: Sequence[str], metric: str) -> str:
    """Algorithm with the best mean score over ``keys`` (relERT without cost, or raw HV)."""
    algs = sorted(next(iter(matrix.values())))
    if metric == "ert":
        score = {a: np.mean([matrix[k][a] / min(matrix[k].values()) for k in keys]) for a in algs}
        return min(algs, key=lambda a: (score[a], a))
    score = {a: np.mean([matrix[k][a] for k in keys]) for a in algs}
    return min(algs, key=lambda a: (-score[a], a))


@dataclass
class SelectionReport:
    metric: str
    sbs: str
    rows: list[dict]  # one per group: group, n, sbs, selector, vbs
    per_instance: list[dict]
    unjoined: list[str]


def _group_of(key: str) -> str:
    parsed = parse_instance_key(key)
    if parsed is None:
        return "all"
    fid, _, dim = parsed
    try:
        return f"d{dim}_g{function_group(int(fid))}"
    except (ValueError, KeyError):
        return f"d{dim}"


def aas_experiment(features: FeatureDataset, perf: PerfTable, train_keys: Sequence[str],
                   test_keys: Sequence[str], k: int = 15, multiplier: int = 50,
                   standardize: bool = True) -> SelectionReport:
    """kNN algorithm selector trained on per-instance winners, scored on the test keys.

    ERT tables are scored with relERT (sample cost ``multiplier * d`` added to
    the selector only); HV tables with relHV against per-instance SBS and VBS.
    """
    matrix = perf.matrix()
    feat_keys = set(features.keys)
    unjoined = sorted((set(train_keys) | set(test_keys)) - (feat_keys & set(matrix)))
    if unjoined:
        raise KeyError(f"keys missing from features or perf table: {unjoined[:10]}")
    metric = perf.metric
    sbs = single_best(matrix, list(train_keys), metric)
    train_set, test_set = set(train_keys), set(test_keys)
    tr_idx = [i for i, key in enumerate(features.keys) if key in train_set]
    te_idx = [i for i, key in enumerate(features.keys) if key in test_set]
    Xtr, Xte = features.X[tr_idx], features.X[te_idx]
    if standardize:
        mu, sd = Xtr.mean(axis=0), Xtr.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        Xtr, Xte = (Xtr - mu) / sd, (Xte - mu) / sd
    ytr = [_best_algorithm(matrix[features.keys[i]], metric) for i in tr_idx]
    pred = knn_classify(Xtr, ytr, Xte, min(k, len(ytr)))
    per_instance = []
    for i, choice in zip(te_idx, pred):
        key = features.keys[i]
        row = matrix[key]
        dim = features.dims[i]
        if metric == "ert":
            vbs = min(row.values())
            sel, s_sbs, s_vbs = relert(row[choice], vbs, multiplier * dim), relert(row[sbs], vbs), 1.0
        else:
            vbs = max(row.values())
            sel, s_sbs, s_vbs = relhv(row[choice], row[sbs], vbs), relhv(row[sbs], row[sbs], vbs), 1.0
        per_instance.append({"key": key, "group": _group_of(key), "choice": choice,
                             "selector": sel, "sbs": s_sbs, "vbs": s_vbs})
    rows = []
    for g in sorted({p["group"] for p in per_instance}):
        ps = [p for p in per_instance if p["group"] == g]
        rows.append({"group": g, "n": len(ps), "sbs": float(np.mean([p["sbs"] for p in ps])),
                     "selector": float(np.mean([p["selector"] for p in ps])),
                     "vbs": float(np.mean([p["vbs"] for p in ps]))})
    return SelectionReport(metric, sbs, rows, per_instance, [])


def write_selection_csv(path, report: SelectionReport) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "n", "sbs", "selector", "vbs"])
    for r in report.rows:
        w.writerow([r["group"], r["n"], f"{r['sbs']:.12g}", f"{r['selector']:.12g}", f"{r['vbs']:.12g}"])
    atomic_write_bytes(path, buf.getvalue().encode())


def write_features_csv(path, ds: FeatureDataset) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = ds.names or [f"f{i}" for i in range(ds.X.shape[1])]
    w.writerow(["instance_key", "fid", "dim", "instance_seed", "repetition"] + names)
    for i, key in enumerate(ds.keys):
        w.writerow([key, ds.fids[i], ds.dims[i], ds.seeds[i], ds.reps[i]] + [repr(float(v)) for v in ds.X[i]])
    atomic_write_bytes(path, buf.getvalue().encode())


def read_features_csv(path, source: str = "deep") -> FeatureDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    names = header[5:]
    X = np.array([[float(v) for v in r[5:]] for r in rows], dtype=np.float64).reshape(len(rows), len(names))
    return FeatureDataset([r[0] for r in rows], [int(r[1]) for r in rows], [int(r[2]) for r in rows],
                          [int(r[3]) for r in rows], [int(r[4]) for r in rows], X, source, names)
