"""Random problem generator built from operator expression trees.

Trees are drawn with an exact operator count, evaluated with protected
operators so that in-box inputs never produce NaN, and screened by a
three-condition acceptance filter (finite output, minimum spread, value cap).
Multi-objective instances are independent single-objective trees stacked
together.
"""

from __future__ import annotations

import dataclasses
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .problem import EvaluationError, ProblemInstance

BINARY_OPS = ("add", "sub", "mul", "div")
UNARY_OPS = ("neg", "abs", "sin", "cos", "exp", "log", "sqrt", "square")
# "lin" and "quad" are weighted linear / squared terms over all decision variables.
REDUCTION_OPS = ("mean", "sum", "min", "max", "lin", "quad")
PAYLOAD_OPS = ("lin", "quad")

DEFAULT_OP_WEIGHTS = {
    "add": 3.0, "sub": 2.0, "mul": 2.0, "div": 1.0,
    "neg": 1.0, "abs": 1.0, "sin": 1.0, "cos": 1.0,
    "exp": 0.5, "log": 0.5, "sqrt": 1.0, "square": 2.0,
    "mean": 1.0, "sum": 1.0, "min": 0.5, "max": 0.5,
    "lin": 2.0, "quad": 2.0,
}

DIV_EPS = 1e-9
LOG_EPS = 1e-9
EXP_CAP = 50.0


class RetryBudgetExhausted(RuntimeError):
    """No acceptable objective was found within the retry budget."""


@dataclass(frozen=True)
class ExprNode:
    """One node of an expression tree.

    ``kind`` is one of ``variable``, ``constant``, ``unary``, ``binary`` or
    ``reduction``. ``payload`` carries the variable index for variables and
    the real coefficient for constants and the ``lin``/``quad`` reductions.
    """

    kind: str
    op: str = ""
    children: tuple["ExprNode", ...] = ()
    payload: float | int | None = None

    def __post_init__(self):
        arity = {"variable": 0, "constant": 0, "unary": 1, "binary": 2, "reduction": 0}
        if self.kind not in arity:
            raise ValueError(f"unknown node kind {self.kind!r}")
        if len(self.children) != arity[self.kind]:
            raise ValueError(f"{self.kind} node needs {arity[self.kind]} children, got {len(self.children)}")

    def walk(self) -> Iterator["ExprNode"]:
        yield self
        for child in self.children:
            yield from child.walk()

    def operator_count(self) -> int:
        return sum(1 for node in self.walk() if node.kind in ("unary", "binary", "reduction"))

    def max_variable(self) -> int:
        return max((int(n.payload) for n in self.walk() if n.kind == "variable"), default=-1)

    def to_prefix(self) -> str:
        return " ".join(_tokens(self))

    def __str__(self):
        return self.to_prefix()


def variable(i: int) -> ExprNode:
    return ExprNode("variable", "x", (), int(i))


def constant(c: float) -> ExprNode:
    return ExprNode("constant", "c", (), float(c))


def unary(op: str, child: ExprNode) -> ExprNode:
    return ExprNode("unary", op, (child,))


def binary(op: str, left: ExprNode, right: ExprNode) -> ExprNode:
    return ExprNode("binary", op, (left, right))


def reduction(op: str, coef: float | None = None) -> ExprNode:
    if op in PAYLOAD_OPS and coef is None:
        coef = 1.0
    return ExprNode("reduction", op, (), None if coef is None else float(coef))


@dataclass
class GeneratorConfig:
    d: int = 2
    op_bounds: tuple[int, int] = (4, 32)
    seed: int = 0
    value_cap: float = 1e7
    min_std: float = 0.1
    probe_size: int | None = None
    box: tuple[float, float] = (-5.0, 5.0)
    retry_budget: int = 1000
    op_weights: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_OP_WEIGHTS))
    variable_prob: float = 0.8
    const_range: tuple[float, float] = (-5.0, 5.0)

    def __post_init__(self):
        lo, hi = self.op_bounds
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if not 1 <= lo <= hi:
            raise ValueError(f"op_bounds must satisfy 1 <= lower <= upper, got {self.op_bounds}")
        if self.min_std <= 0 or self.value_cap <= 0:
            raise ValueError("min_std and value_cap must be positive")
        if self.box[0] >= self.box[1]:
            raise ValueError("empty box")
        unknown = set(self.op_weights) - set(BINARY_OPS + UNARY_OPS + REDUCTION_OPS)
        if unknown:
            raise ValueError(f"unknown operators in op_weights: {sorted(unknown)}")

    @property
    def effective_probe_size(self) -> int:
        return self.probe_size if self.probe_size is not None else 50 * self.d


@dataclass
class GenerationStats:
    attempts: int = 0
    accepted: int = 0
    op_counts: Counter = field(default_factory=Counter)

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.attempts if self.attempts else 0.0


# --------------------------------------------------------------------------
# generation


def _weighted_choice(rng: np.random.Generator, ops: tuple[str, ...], weights: dict[str, float]) -> str | None:
    w = np.array([weights.get(op, 0.0) for op in ops], dtype=np.float64)
    if w.sum() <= 0:
        return None
    return ops[int(rng.choice(len(ops), p=w / w.sum()))]


def _leaf(config: GeneratorConfig, rng: np.random.Generator) -> ExprNode:
    if rng.random() < config.variable_prob:
        return variable(int(rng.integers(config.d)))
    lo, hi = config.const_range
    return constant(round(float(rng.uniform(lo, hi)), 4))


def _build(n_ops: int, config: GeneratorConfig, rng: np.random.Generator) -> ExprNode:
    if n_ops == 0:
        return _leaf(config, rng)
    pool = UNARY_OPS + BINARY_OPS + (REDUCTION_OPS if n_ops == 1 else ())
    op = _weighted_choice(rng, pool, config.op_weights)
    if op is None:
        raise ValueError("operator weights leave no usable operator")
    if op in REDUCTION_OPS:
        coef = None
        if op in PAYLOAD_OPS:
            coef = round(float(rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 2.0)), 4)
        return reduction(op, coef)
    if op in UNARY_OPS:
        return unary(op, _build(n_ops - 1, config, rng))
    n_left = int(rng.integers(0, n_ops))
    return binary(op, _build(n_left, config, rng), _build(n_ops - 1 - n_left, config, rng))


def generate_tree(config: GeneratorConfig, rng: np.random.Generator) -> ExprNode:
    """Draw a tree whose operator count is uniform on ``config.op_bounds``."""
    lo, hi = config.op_bounds
    n_ops = int(rng.integers(lo, hi + 1))
    return _build(n_ops, config, rng)


# --------------------------------------------------------------------------
# evaluation


def _protected_div(a, b):
    safe = np.abs(b) > DIV_EPS
    return np.where(safe, a / np.where(safe, b, 1.0), a)


_UNARY_FN = {
    "neg": np.negative,
    "abs": np.abs,
    "sin": np.sin,
    "cos": np.cos,
    "exp": lambda a: np.exp(np.minimum(a, EXP_CAP)),
    "log": lambda a: np.log(np.abs(a) + LOG_EPS),
    "sqrt": lambda a: np.sqrt(np.abs(a)),
    "square": np.square,
}

_BINARY_FN = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": _protected_div,
}


def _eval(node: ExprNode, X: np.ndarray) -> np.ndarray:
    kind = node.kind
    if kind == "variable":
        return X[:, node.payload]
    if kind == "constant":
        return np.full(X.shape[0], node.payload)
    if kind == "unary":
        return _UNARY_FN[node.op](_eval(node.children[0], X))
    if kind == "binary":
        return _BINARY_FN[node.op](_eval(node.children[0], X), _eval(node.children[1], X))
    op = node.op
    if op == "mean":
        return X.mean(axis=1)
    if op == "sum":
        return X.sum(axis=1)
    if op == "min":
        return X.min(axis=1)
    if op == "max":
        return X.max(axis=1)
    if op == "lin":
        return node.payload * X.sum(axis=1)
    if op == "quad":
        return node.payload * np.square(X).sum(axis=1)
    raise ValueError(f"unknown reduction {op!r}")


def evaluate_tree(tree: ExprNode, X: np.ndarray, max_variable: int | None = None) -> np.ndarray:
    """Evaluate ``tree`` row-wise on ``X`` (n x d).

    ``max_variable`` may pass a precomputed ``tree.max_variable()``.

    Raises:
        EvaluationError: when the result overflows to a non-finite value.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    top = tree.max_variable() if max_variable is None else max_variable
    if top >= X.shape[1]:
        raise ValueError(f"tree uses x{top} but X has {X.shape[1]} columns")
    with np.errstate(all="ignore"):
        y = np.asarray(_eval(tree, X), dtype=np.float64)
    if y.shape != (X.shape[0],):
        y = np.broadcast_to(y, (X.shape[0],)).copy()
    if not np.all(np.isfinite(y)):
        raise EvaluationError(f"non-finite output from tree: {tree.to_prefix()[:120]}")
    return y


class TreeObjective:
    """Callable wrapper so a tree can serve as a ProblemInstance objective."""

    def __init__(self, tree: ExprNode):
        self.tree = tree
        self.max_variable = tree.max_variable()

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return evaluate_tree(self.tree, X, self.max_variable)

    def __repr__(self):
        return f"TreeObjective({self.tree.to_prefix()!r})"


# --------------------------------------------------------------------------
# filtering and instance assembly


def _passes(y: np.ndarray, min_std: float, value_cap: float) -> bool:
    with np.errstate(over="ignore", invalid="ignore"):
        return bool(np.all(np.isfinite(y)) and np.std(y) >= min_std and np.all(np.abs(y) <= value_cap))


def accept_instance(
    instance: ProblemInstance,
    rng: np.random.Generator,
    config: GeneratorConfig | None = None,
) -> bool:
    """Probe the instance uniformly and apply the three acceptance conditions.

    Every objective must be finite at all probe points, have a population
    standard deviation of at least ``min_std`` and stay within
    ``[-value_cap, value_cap]``.
    """
    config = config or GeneratorConfig(d=instance.d)
    n = config.probe_size if config.probe_size is not None else 50 * instance.d
    if n < 2:
        raise ValueError("probe_size must be at least 2")
    lo, hi = instance.bounds[:, 0], instance.bounds[:, 1]
    X = rng.uniform(lo, hi, size=(n, instance.d))
    for objective in instance.objectives:
        try:
            with np.errstate(all="ignore"):
                y = np.asarray(objective(X), dtype=np.float64).reshape(-1)
        except (EvaluationError, FloatingPointError, OverflowError):
            return False
        if y.shape[0] != n or not _passes(y, config.min_std, config.value_cap):
            return False
    return True


def instance_from_trees(trees: Iterable[ExprNode], d: int, box=(-5.0, 5.0), seed: int | None = None) -> ProblemInstance:
    trees = list(trees)
    bounds = np.tile(np.asarray(box, dtype=np.float64), (d, 1))
    return ProblemInstance(
        objectives=[TreeObjective(t) for t in trees],
        bounds=bounds,
        origin={"kind": "random", "seed": seed},
    )


def generate_instance(
    d: int,
    m: int,
    config: GeneratorConfig,
    rng: np.random.Generator,
    seed: int | None = None,
    stats: GenerationStats | None = None,
) -> ProblemInstance:
    """Generate ``m`` independently filtered trees and stack them into one instance.

    Raises:
        RetryBudgetExhausted: if some objective is rejected ``retry_budget`` times.
    """
    if d < 1 or m < 1:
        raise ValueError("d and m must be >= 1")
    cfg = dataclasses.replace(config, d=d) if config.d != d else config
    trees = []
    for _ in range(m):
        for _attempt in range(cfg.retry_budget):
            tree = generate_tree(cfg, rng)
            candidate = instance_from_trees([tree], d, cfg.box)
            ok = accept_instance(candidate, rng, cfg)
            if stats is not None:
                stats.attempts += 1
                if ok:
                    stats.accepted += 1
                    stats.op_counts.update(n.op for n in tree.walk() if n.kind not in ("variable", "constant"))
            if ok:
                trees.append(tree)
                break
        else:
            raise RetryBudgetExhausted(
                f"no acceptable objective after {cfg.retry_budget} attempts (min_std={cfg.min_std}, cap={cfg.value_cap})"
            )
    return instance_from_trees(trees, d, cfg.box, seed)


def instance_seed(base_seed: int, index: int) -> int:
    """Per-instance seed derived from a corpus seed and record index."""
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1, dtype=np.uint32)[0])


def generate_corpus(
    n_instances: int,
    config: GeneratorConfig,
    dims: Iterable[tuple[int, int]],
    stats: GenerationStats | None = None,
) -> list[ProblemInstance]:
    """Generate ``n_instances`` accepted instances cycling uniformly over ``dims``.

    ``dims`` lists admissible ``(d, m)`` pairs; instance ``i`` draws its pair
    and everything else from its own seed so records are reproducible one by one.
    """
    dims = list(dims)
    out = []
    for i in range(n_instances):
        s = instance_seed(config.seed, i)
        rng = np.random.default_rng(s)
        d, m = dims[int(rng.integers(len(dims)))]
        out.append(generate_instance(d, m, config, rng, seed=s, stats=stats))
    return out


# --------------------------------------------------------------------------
# serialization


def _tokens(node: ExprNode) -> Iterator[str]:
    if node.kind == "variable":
        yield f"x{node.payload}"
    elif node.kind == "constant":
        yield f"c:{node.payload!r}"
    elif node.kind == "reduction":
        yield node.op if node.payload is None else f"{node.op}:{node.payload!r}"
    else:
        yield node.op
        for child in node.children:
            yield from _tokens(child)


def parse_prefix(text: str) -> ExprNode:
    tokens = text.split()
    pos = 0

    def parse() -> ExprNode:
        nonlocal pos
        if pos >= len(tokens):
            raise ValueError("unexpected end of expression")
        tok = tokens[pos]
        pos += 1
        if tok.startswith("x") and tok[1:].isdigit():
            return variable(int(tok[1:]))
        if tok.startswith("c:"):
            return constant(float(tok[2:]))
        name, _, arg = tok.partition(":")
        if name in REDUCTION_OPS:
            return reduction(name, float(arg) if arg else None)
        if name in UNARY_OPS:
            return unary(name, parse())
        if name in BINARY_OPS:
            left = parse()
            return binary(name, left, parse())
        raise ValueError(f"unknown token {tok!r}")

    tree = parse()
    if pos != len(tokens):
        raise ValueError(f"trailing tokens in expression: {tokens[pos:]}")
    return tree


def serialize_instance(instance: ProblemInstance) -> str:
    """One-line record: ``d=.. m=.. bounds=lo:hi,.. seed=.. | <tree> | <tree>``."""
    trees = []
    for f in instance.objectives:
        if not isinstance(f, TreeObjective):
            raise TypeError("only tree-based instances can be serialized")
        trees.append(f.tree.to_prefix())
    bounds = ",".join(f"{lo!r}:{hi!r}" for lo, hi in instance.bounds.tolist())
    seed = instance.origin.get("seed")
    header = f"d={instance.d} m={instance.m} bounds={bounds} seed={'-' if seed is None else seed}"
    return " | ".join([header] + trees)


def parse_instance(line: str) -> ProblemInstance:
    parts = [p.strip() for p in line.strip().split("|")]
    header = dict(item.split("=", 1) for item in parts[0].split())
    d, m = int(header["d"]), int(header["m"])
    bounds = [tuple(float(v) for v in pair.split(":")) for pair in header["bounds"].split(",")]
    trees = [parse_prefix(p) for p in parts[1:]]
    if len(trees) != m or len(bounds) != d:
        raise ValueError("record header does not match its body")
    if any(t.max_variable() >= d for t in trees):
        raise ValueError("tree references a variable outside the decision space")
    seed = None if header.get("seed", "-") == "-" else int(header["seed"])
    return ProblemInstance(
        objectives=[TreeObjective(t) for t in trees],
        bounds=np.array(bounds),
        origin={"kind": "random", "seed": seed},
    )


def write_corpus(path, instances: Iterable[ProblemInstance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(serialize_instance(inst) + "\n")


def read_corpus(path) -> list[ProblemInstance]:
    with open(path, encoding="utf-8") as fh:
        return [parse_instance(line) for line in fh if line.strip()]
