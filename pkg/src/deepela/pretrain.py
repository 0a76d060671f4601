"""Self-supervised pretraining with a symmetric InfoNCE student/teacher objective.

One training step draws two augmented views of every instance in the batch,
tokenizes both, projects them with the student (gradient) and the EMA
teacher (no gradient), and minimizes

    0.5 * (info_nce(P1, T2) + info_nce(P2, T1))

where ``info_nce(P, T) = 2 tau * mean_i(-log softmax_row(P T^T / tau)_ii)``.
Projections are L2-normalized before the loss by default so that ``tau``
acts on cosine similarities.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as F
from .benchmarks import random_rotation
from .model import (DeepELA, ema_update, forward_features, load_checkpoint, model_from_checkpoint,
                    save_checkpoint)
from .problem import EvaluationError, ProblemInstance, Sample
from .randgen import GeneratorConfig, generate_corpus
from .sampling import uniform_sample
from .tensor import Tape, Tensor
from .tokenizer import tokenize


@dataclass(frozen=True)
class AugmentationSpec:
    rotate: bool = True
    invert: bool = True
    permute_columns: bool = True
    independent_resample: bool = True

    @property
    def any_active(self) -> bool:
        return self.rotate or self.invert or self.permute_columns or self.independent_resample


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    tau: float = 0.05
    epochs: int = 40
    instances_per_epoch: int = 3200
    lr: float = 1e-3
    warmup_frac: float = 0.02
    grad_accum: int = 1
    ema_momentum: float = 0.01
    bn_momentum: float = 0.1
    multiplier: int = 25
    nu: int = 4
    d_range: tuple[int, int] = (2, 3)
    m_range: tuple[int, int] = (1, 2)
    seed: int = 0
    corpus_size: int = 2048
    op_bounds: tuple[int, int] = (4, 32)
    normalize: bool = True
    augment: AugmentationSpec = field(default_factory=AugmentationSpec)

    def __post_init__(self):
        if not 0 < self.tau <= 0.3:
            raise ValueError("tau must lie in (0, 0.3]")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for a contrastive loss")
        if self.grad_accum < 1 or self.epochs < 1 or self.instances_per_epoch < 1:
            raise ValueError("grad_accum, epochs and instances_per_epoch must be >= 1")
        if not 0 < self.ema_momentum <= 1:
            raise ValueError("ema_momentum must lie in (0, 1]")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not self.dims:
            raise ValueError(f"no (d, m) pair with d + m <= nu={self.nu}")
        if self.d_range[0] < 1 or self.m_range[0] < 1:
            raise ValueError("d and m ranges must start at >= 1")
        if not self.augment.any_active:
            raise ValueError("at least one augmentation must be active for training")

    @property
    def dims(self) -> list[tuple[int, int]]:
        return [(d, m) for d in range(self.d_range[0], self.d_range[1] + 1)
                for m in range(self.m_range[0], self.m_range[1] + 1) if d + m <= self.nu]

    @property
    def steps(self) -> int:
        return self.epochs * max(1, self.instances_per_epoch // self.batch_size)

    @property
    def updates(self) -> int:
        return max(1, self.steps // self.grad_accum)


# --------------------------------------------------------------------------
# views and loss


def _augment(X: np.ndarray, Y: np.ndarray, bounds: np.ndarray, spec: AugmentationSpec,
             rng: np.random.Generator) -> Sample:
    d, m = X.shape[1], Y.shape[1]
    center = bounds.mean(axis=1)
    half = (bounds[:, 1] - bounds[:, 0]) / 2
    Z = (X - center) / half
    if spec.rotate:
        Z = Z @ random_rotation(d, rng)
    if spec.invert:
        Z = Z * rng.choice([-1.0, 1.0], size=d)
    if spec.permute_columns:
        Z = Z[:, rng.permutation(d)]
        Y = Y[:, rng.permutation(m)]
    return Sample(center + half * Z, Y)


def make_views(instance: ProblemInstance, n: int, spec: AugmentationSpec,
               rng: np.random.Generator) -> tuple[Sample, Sample]:
    """Two augmented samples of ``instance``, each with ``n`` points.

    Objectives are evaluated on the raw points; the geometric augmentation
    (rotation about the box center, sign flips, column permutations) is then
    applied to the decision matrix so both views describe the same problem.

    Raises:
        EvaluationError: if the instance yields non-finite values.
    """
    if n < 2:
        raise ValueError("views need at least two points")
    X1 = uniform_sample(instance.bounds, n, rng)
    X2 = uniform_sample(instance.bounds, n, rng) if spec.independent_resample else X1
    Y1 = instance.evaluate(X1)
    Y2 = instance.evaluate(X2) if spec.independent_resample else Y1
    return (_augment(X1, Y1, instance.bounds, spec, rng),
            _augment(X2, Y2, instance.bounds, spec, rng))


def _target(x) -> Tensor:
    return Tensor(x.data if isinstance(x, Tensor) else x)


def info_nce(P, P_target, tau: float = 0.05) -> Tensor:
    """2 tau-scaled cross-entropy between row-softmax(P P_target^T / tau) and the identity.

    ``P_target`` is treated as a constant. Returns a scalar tensor.
    """
    P = F.as_tensor(P)
    T = _target(P_target)
    if P.shape != T.shape or P.ndim != 2:
        raise ValueError(f"info_nce needs matching (j, p) inputs, got {P.shape} and {T.shape}")
    if tau <= 0:
        raise ValueError("tau must be positive")
    S = F.matmul(P, Tensor(T.data.T))
    if not np.all(np.isfinite(S.data)):
        raise FloatingPointError("non-finite logits in info_nce")
    logp = F.log_softmax_rows(S, tau)
    return F.scale(F.mean(F.diagonal(logp)), -2.0 * tau)


def symmetric_loss(P1, P2, T1, T2, tau: float = 0.05) -> Tensor:
    """0.5 * (info_nce(P1, T2) + info_nce(P2, T1)); teachers are targets only."""
    P1, P2 = F.as_tensor(P1), F.as_tensor(P2)
    shapes = {P1.shape, P2.shape, _target(T1).shape, _target(T2).shape}
    if len(shapes) != 1:
        raise ValueError(f"symmetric_loss needs four equal shapes, got {sorted(shapes)}")
    return F.scale(F.add(info_nce(P1, T2, tau), info_nce(P2, T1, tau)), 0.5)


def _l2(a: np.ndarray) -> np.ndarray:
    return a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), 1e-12)


def pair_cosines(P: np.ndarray, T: np.ndarray) -> tuple[float, float]:
    """Mean cosine of matched rows and of mismatched rows."""
    C = _l2(P) @ _l2(T).T
    j = C.shape[0]
    pos = float(np.mean(np.diag(C)))
    neg = float((C.sum() - np.trace(C)) / (j * (j - 1))) if j > 1 else float("nan")
    return pos, neg


# --------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if lr:
                p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def learning_rate(update: int, cfg: TrainConfig) -> float:
    """Linear warmup over the first ``warmup_frac`` of updates, then constant."""
    warm = max(1, math.ceil(cfg.warmup_frac * cfg.updates))
    return cfg.lr * min(1.0, (update + 1) / warm)


# --------------------------------------------------------------------------
# training state and step


@dataclass
class LossBreakdown:
    step: int
    loss: float
    pos_cos: float
    neg_cos: float
    lr: float
    updated: bool


class TrainState:
    def __init__(self, model: DeepELA, cfg: TrainConfig, pool: list[ProblemInstance] | None = None):
        if model.cfg.nu != cfg.nu:
            raise ValueError(f"model nu={model.cfg.nu} differs from training nu={cfg.nu}")
        self.model = model
        self.cfg = cfg
        self.optimizer = Adam(model.parameters())
        self.step = 0
        self.accum = 0
        self.rng = np.random.default_rng([cfg.seed, 1])
        for st in (model.bn_student, model.bn_teacher):
            st.momentum = cfg.bn_momentum
        self.pool = pool if pool is not None else build_pool(cfg)
        self.by_d: dict[int, list[ProblemInstance]] = {}
        for inst in self.pool:
            self.by_d.setdefault(inst.d, []).append(inst)
        self.history: list[LossBreakdown] = []

    def next_batch(self) -> list[ProblemInstance]:
        """``batch_size`` instances sharing one d, so every view has the same token count."""
        ds = sorted(self.by_d)
        weights = np.array([len(self.by_d[d]) for d in ds], dtype=float)
        d = ds[int(self.rng.choice(len(ds), p=weights / weights.sum()))]
        group = self.by_d[d]
        j = self.cfg.batch_size
        idx = self.rng.choice(len(group), size=j, replace=len(group) < j)
        return [group[i] for i in idx]


def build_pool(cfg: TrainConfig) -> list[ProblemInstance]:
    gen = GeneratorConfig(seed=cfg.seed, op_bounds=tuple(cfg.op_bounds))
    return generate_corpus(cfg.corpus_size, gen, cfg.dims)


def _project(model: DeepELA, T_final: Tensor, teacher: bool, split: int) -> tuple[Tensor, Tensor]:
    f = model.extract(T_final, teacher=teacher)
    halves = []
    for lo, hi in ((0, split), (split, f.shape[0])):
        part = _rows(f, lo, hi)
        halves.append(model.head(part, training=True, teacher=teacher))
    return halves[0], halves[1]


def _rows(x: Tensor, lo: int, hi: int) -> Tensor:
    def backward(g):
        out = np.zeros_like(x.data)
        out[lo:hi] = g
        return (out,)

    return F._result(x.data[lo:hi], (x,), backward)


def contrastive_loss(model: DeepELA, x: Tensor, j: int, tau: float, normalize: bool = True,
                     targets: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Symmetric loss for a stacked (2j, n, width) batch of first and second views.

    Returns the loss plus the student projection of view 1 and the teacher
    projection of view 2. Passing ``targets`` skips the teacher and uses the
    given (already normalized) projections instead.
    """
    T_final = model.trunk(x, training=True)
    P1, P2 = _project(model, T_final, teacher=False, split=j)
    if targets is None:
        Q1, Q2 = _project(model, F.detach(T_final), teacher=True, split=j)
        if normalize:
            Q1, Q2 = Tensor(_l2(Q1.data)), Tensor(_l2(Q2.data))
    else:
        Q1, Q2 = Tensor(targets[0]), Tensor(targets[1])
    if normalize:
        P1, P2 = F.l2_normalize(P1), F.l2_normalize(P2)
    return symmetric_loss(P1, P2, Q1, Q2, tau), P1, Q2


def train_step(state: TrainState, instances: Sequence[ProblemInstance] | None = None) -> LossBreakdown:
    """One forward/backward pass; the optimizer and EMA update every ``grad_accum`` calls."""
    cfg, model = state.cfg, state.model
    instances = state.next_batch() if instances is None else list(instances)
    mc = model.cfg
    views1, views2 = [], []
    for inst in instances:
        try:
            s1, s2 = make_views(inst, cfg.multiplier * inst.d, cfg.augment, state.rng)
        except EvaluationError:
            continue
        views1.append(tokenize(s1, mc.k, mc.nu, mc.stride).tokens)
        views2.append(tokenize(s2, mc.k, mc.nu, mc.stride).tokens)
    j = len(views1)
    if j < 2:
        raise RuntimeError("fewer than two usable instances in batch")
    x = Tensor(np.stack(views1 + views2))

    with Tape() as tape:
        loss, P1, Q2 = contrastive_loss(model, x, j, cfg.tau, cfg.normalize)
        value = float(loss.data)
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss at step {state.step}")
        scaled = F.scale(loss, 1.0 / cfg.grad_accum)
    tape.backward(scaled)

    state.accum += 1
    lr = learning_rate(state.optimizer.t, cfg)
    updated = state.accum == cfg.grad_accum
    if updated:
        state.optimizer.step(lr)
        model.zero_grad()
        ema_update(model.teacher, model.params, cfg.ema_momentum)
        state.accum = 0
    pos, neg = pair_cosines(P1.data, Q2.data)
    rec = LossBreakdown(state.step, value, pos, neg, lr, updated)
    state.step += 1
    state.history.append(rec)
    return rec


METRIC_FIELDS = ("step", "loss", "pos_cos", "neg_cos", "lr")


def write_metrics(path, history: Sequence[LossBreakdown]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for r in history:
            w.writerow([r.step, repr(r.loss), repr(r.pos_cos), repr(r.neg_cos), repr(r.lr)])
    os.replace(tmp, path)


def train(state: TrainState, steps: int | None = None,
          callback: Callable[[LossBreakdown], None] | None = None,
          checkpoint_path=None, checkpoint_every: int = 0) -> TrainState:
    total = state.cfg.steps if steps is None else steps
    while state.step < total:
        rec = train_step(state)
        if callback is not None:
            callback(rec)
        if checkpoint_path and checkpoint_every and state.step % checkpoint_every == 0:
            save_training_checkpoint(checkpoint_path, state)
    if checkpoint_path:
        save_training_checkpoint(checkpoint_path, state)
    return state


# --------------------------------------------------------------------------
# persistence


def _config_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["augment"] = AugmentationSpec(**d.get("augment", {}))
    for key in ("d_range", "m_range", "op_bounds"):
        if key in d:
            d[key] = tuple(d[key])
    return TrainConfig(**d)


def save_training_checkpoint(path, state: TrainState) -> None:
    opt = state.optimizer
    names = list(state.model.params)
    extra = {f"opt.m.{n}": m for n, m in zip(names, opt.m)}
    extra.update({f"opt.v.{n}": v for n, v in zip(names, opt.v)})
    meta = {"train": _config_dict(state.cfg), "step": state.step, "accum": state.accum,
            "opt_t": opt.t, "data_rng": state.rng.bit_generator.state,
            "history": [dataclasses.asdict(r) for r in state.history]}
    save_checkpoint(path, state.model, meta, extra)


def resume(path, pool: list[ProblemInstance] | None = None) -> TrainState:
    ck = load_checkpoint(path)
    model = model_from_checkpoint(ck)
    cfg = train_config_from_dict(ck.meta["train"])
    state = TrainState(model, cfg, pool)
    # TrainState resets bn momentum and rng; restore saved values
    state.step, state.accum = ck.meta["step"], ck.meta["accum"]
    state.rng.bit_generator.state = ck.meta["data_rng"]
    state.optimizer.t = ck.meta["opt_t"]
    dtype = F.get_default_dtype()
    for i, n in enumerate(model.params):
        state.optimizer.m[i] = ck.tensors[f"opt.m.{n}"].astype(dtype)
        state.optimizer.v[i] = ck.tensors[f"opt.v.{n}"].astype(dtype)
    state.history = [LossBreakdown(**r) for r in ck.meta.get("history", [])]
    return state


# --------------------------------------------------------------------------
# diagnostics


@dataclass
class AlignmentReport:
    pos_mean: float
    neg_mean: float
    fraction: float
    n_instances: int


def alignment_report(model: DeepELA, instances: Sequence[ProblemInstance], rng: np.random.Generator,
                     n: int | None = None, multiplier: int = 25,
                     spec: AugmentationSpec | None = None) -> AlignmentReport:
    """Compare feature cosine between two views of one instance against other instances.

    For instance ``i`` the positive score is cos(f(view1_i), f(view2_i)) and the
    negative score is the mean of cos(f(view1_i), f(view2_j)) over ``j != i``.
    ``fraction`` is the share of instances whose positive beats that mean.
    """
    if len(instances) < 2:
        raise ValueError("alignment_report needs at least two instances")
    spec = AugmentationSpec() if spec is None else spec
    mc = model.cfg
    t1, t2 = [], []
    for inst in instances:
        size = n if n is not None else multiplier * inst.d
        s1, s2 = make_views(inst, size, spec, rng)
        t1.append(tokenize(s1, mc.k, mc.nu, mc.stride))
        t2.append(tokenize(s2, mc.k, mc.nu, mc.stride))
    f1 = _l2(np.asarray(forward_features(model, t1), dtype=np.float64))
    f2 = _l2(np.asarray(forward_features(model, t2), dtype=np.float64))
    C = f1 @ f2.T
    k = C.shape[0]
    pos = np.diag(C)
    neg = (C.sum(axis=1) - pos) / (k - 1)
    return AlignmentReport(float(pos.mean()), float(neg.mean()), float(np.mean(pos > neg)), k)
