"""Transformer backbone, projection heads, EMA teacher and checkpoints.

Tokens enter as an ``(n, 2k nu)`` matrix (or a batch ``(B, n, 2k nu)`` of
equally sized token sets). The backbone embeds them, runs ``depth``
pre-norm attention blocks without positional encoding, applies a final
layer norm and the feature extractor, mean-pools over tokens and squashes
with tanh. Two layer conventions are available:

``"table1"`` (default)
    Only the embedding carries a bias. The feed-forward block goes
    ``d_model -> 4 d_model``, GLU halves it to ``2 d_model``, then back to
    ``d_model``. Head hidden width is ``h = 4 n_feat``, bias-free. This
    reproduces the published parameter counts exactly.
``"literal"``
    Every linear layer carries a bias, the feed-forward GLU produces
    ``4 d_model`` hidden units and head hidden width is ``h = 2 n_feat``.

The teacher owns copies of the extractor and head only. It reads the
(detached) final backbone activations of the student and is updated by EMA.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as F
from .tensor import BatchNormState, Tensor
from .tokenizer import TokenSet

CONVENTIONS = ("table1", "literal")

# published totals: (backbone, backbone + heads)
TABLE1_COUNTS = {"medium": (2_263_296, 2_355_456), "large": (9_189_888, 9_558_528)}


@dataclass(frozen=True)
class BackboneConfig:
    nu: int = 6
    k: int = 8
    depth: int = 6
    heads: int = 4
    d_model: int = 192
    n_feat: int = 24
    stride: int = 1
    dropout: float = 0.1
    convention: str = "table1"

    def __post_init__(self):
        if self.nu < 2 or self.k < 1:
            raise ValueError("need nu >= 2 and k >= 1")
        if self.depth < 1 or self.n_feat < 1 or self.heads < 1:
            raise ValueError("depth, heads and n_feat must be >= 1")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.convention not in CONVENTIONS:
            raise ValueError(f"convention must be one of {CONVENTIONS}")

    @property
    def token_width(self) -> int:
        return 2 * self.k * self.nu

    @property
    def ff_hidden(self) -> int:
        return (2 if self.convention == "table1" else 4) * self.d_model

    @property
    def head_hidden(self) -> int:
        return (4 if self.convention == "table1" else 2) * self.n_feat

    @property
    def proj_dim(self) -> int:
        return 8 * self.n_feat

    @property
    def all_bias(self) -> bool:
        return self.convention == "literal"

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


PRESETS = {
    "medium": BackboneConfig(nu=6, k=8, depth=6, heads=4, d_model=192, n_feat=24, stride=1),
    "large": BackboneConfig(nu=12, k=16, depth=6, heads=8, d_model=384, n_feat=48, stride=2),
    "tiny": BackboneConfig(nu=4, k=4, depth=3, heads=4, d_model=32, n_feat=8, stride=1),
    "micro": BackboneConfig(nu=2, k=2, depth=1, heads=2, d_model=8, n_feat=4, stride=1),
}


def preset(name: str, **overrides) -> BackboneConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return dataclasses.replace(base, **overrides)


# --------------------------------------------------------------------------
# parameter layout


def _linear_shapes(name: str, c_in: int, c_out: int, bias: bool) -> list[tuple[str, tuple[int, ...]]]:
    out = [(f"{name}.W", (c_in, c_out))]
    if bias:
        out.append((f"{name}.b", (c_out,)))
    return out


def _ln_shapes(name: str, c: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{name}.g", (c,)), (f"{name}.b", (c,))]


def _extractor_shapes(cfg: BackboneConfig, prefix: str) -> list:
    return _linear_shapes(f"{prefix}extractor", cfg.d_model, 2 * cfg.n_feat, cfg.all_bias)


def _head_shapes(cfg: BackboneConfig, prefix: str) -> list:
    n, h, b = cfg.n_feat, cfg.head_hidden, cfg.all_bias
    return (_linear_shapes(f"{prefix}head.l0", n, 2 * h, b)
            + _linear_shapes(f"{prefix}head.l1", h, 2 * h, b)
            + _linear_shapes(f"{prefix}head.l2", h, cfg.proj_dim, b))


def backbone_shapes(cfg: BackboneConfig) -> list[tuple[str, tuple[int, ...]]]:
    D, b = cfg.d_model, cfg.all_bias
    shapes = _linear_shapes("embed", cfg.token_width, 2 * D, True)
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes += _ln_shapes(p + "ln_a", D)
        for w in "qkvo":
            shapes += _linear_shapes(p + f"attn.{w}", D, D, b)
        shapes += _ln_shapes(p + "ln_b", D)
        shapes += _linear_shapes(p + "ff.l0", D, 2 * cfg.ff_hidden, b)
        shapes += _linear_shapes(p + "ff.l1", cfg.ff_hidden, D, b)
    shapes += _ln_shapes("ln_final", D)
    shapes += _extractor_shapes(cfg, "")
    return shapes


def student_shapes(cfg: BackboneConfig) -> list:
    return backbone_shapes(cfg) + _head_shapes(cfg, "")


def teacher_shapes(cfg: BackboneConfig) -> list:
    return _extractor_shapes(cfg, "teacher.") + _head_shapes(cfg, "teacher.")


def param_count(cfg: BackboneConfig, with_heads: bool = False) -> int:
    """Scalar parameter count of the backbone (incl. extractor), optionally plus both heads and the teacher extractor."""
    shapes = backbone_shapes(cfg)
    if with_heads:
        shapes = student_shapes(cfg) + teacher_shapes(cfg)
    return int(sum(np.prod(s) for _, s in shapes))


def params_report(name: str = "medium") -> dict:
    """Counts under both conventions against the published reference values."""
    ref_bb, ref_total = TABLE1_COUNTS.get(name, (None, None))
    rows = {}
    for conv in CONVENTIONS:
        cfg = preset(name, convention=conv)
        bb, total = param_count(cfg), param_count(cfg, with_heads=True)
        row = {"backbone": bb, "total": total}
        if ref_bb is not None:
            row["backbone_delta"] = bb - ref_bb
            row["backbone_rel_delta"] = (bb - ref_bb) / ref_bb
            row["total_delta"] = total - ref_total
        rows[conv] = row
    return {"preset": name, "reference_backbone": ref_bb, "reference_total": ref_total, "conventions": rows}


# --------------------------------------------------------------------------
# model


class DeepELA:
    """Student backbone + head, EMA teacher extractor + head, batch-norm state."""

    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        for name, shape in student_shapes(cfg):
            self.params[name] = Tensor(self._init(name, shape), requires_grad=True, name=name)
        self.teacher: dict[str, Tensor] = {}
        for name, shape in teacher_shapes(cfg):
            src = self.params[name[len("teacher."):]]
            self.teacher[name] = Tensor(src.data.copy(), requires_grad=False, name=name)
        self.bn_student = BatchNormState.create(cfg.proj_dim)
        self.bn_teacher = BatchNormState.create(cfg.proj_dim)

    def _init(self, name: str, shape) -> np.ndarray:
        if name.endswith(".g"):
            return np.ones(shape)
        if name.endswith(".b") and (".ln" in name or name.startswith("ln")):
            return np.zeros(shape)
        fan_in = shape[0] if len(shape) == 2 else self._fan_in_of_bias(name)
        bound = 1.0 / np.sqrt(fan_in)
        return self.rng.uniform(-bound, bound, size=shape)

    def _fan_in_of_bias(self, name: str) -> int:
        return dict(student_shapes(self.cfg))[name[:-2] + ".W"][0]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward pieces -------------------------------------------------

    def _linear(self, x: Tensor, name: str, store: dict | None = None) -> Tensor:
        store = self.params if store is None else store
        y = F.matmul(x, store[f"{name}.W"])
        b = store.get(f"{name}.b")
        return F.add(y, b) if b is not None else y

    def mha(self, x: Tensor, prefix: str, return_weights: bool = False):
        """Multi-head scaled dot-product self-attention over the token axis of a (B, n, D) input."""
        B, n, D = x.shape
        H = self.cfg.heads
        dh = D // H

        def split(t):
            return F.transpose(F.reshape(t, (B, n, H, dh)), (0, 2, 1, 3))

        q = split(self._linear(x, prefix + "q"))
        k = split(self._linear(x, prefix + "k"))
        v = split(self._linear(x, prefix + "v"))
        attn = F.softmax_rows(F.matmul(q, F.swap_last(k)), temperature=np.sqrt(dh))
        ctx = F.reshape(F.transpose(F.matmul(attn, v), (0, 2, 1, 3)), (B, n, D))
        out = self._linear(ctx, prefix + "o")
        return (out, attn.data) if return_weights else out

    def trunk(self, x: Tensor, training: bool = False) -> Tensor:
        """Embedding through the final layer norm; input (B, n, width) -> (B, n, d_model)."""
        cfg, P = self.cfg, self.params
        if x.shape[-1] != cfg.token_width:
            raise ValueError(f"token width {x.shape[-1]} does not match config width {cfg.token_width}")
        h = F.glu(self._linear(x, "embed"))
        for i in range(cfg.depth):
            p = f"blocks.{i}."
            a = F.layer_norm(h, P[p + "ln_a.g"], P[p + "ln_a.b"])
            h = F.add(h, self.mha(a, p + "attn."))
            f = F.layer_norm(h, P[p + "ln_b.g"], P[p + "ln_b.b"])
            f = self._linear(F.glu(self._linear(f, p + "ff.l0")), p + "ff.l1")
            h = F.add(h, F.dropout(f, cfg.dropout, training, self.rng))
        return F.layer_norm(h, P["ln_final.g"], P["ln_final.b"])

    def extract(self, t_final: Tensor, teacher: bool = False) -> Tensor:
        store = self.teacher if teacher else self.params
        prefix = "teacher.extractor" if teacher else "extractor"
        e = F.glu(self._linear(t_final, prefix, store))
        return F.tanh(F.row_mean_pool(e))

    def head(self, f: Tensor, training: bool, teacher: bool = False) -> Tensor:
        store = self.teacher if teacher else self.params
        p = "teacher.head." if teacher else "head."
        rate = 0.0 if teacher else self.cfg.dropout
        drop = training and not teacher
        z = F.dropout(F.glu(self._linear(f, p + "l0", store)), rate, drop, self.rng)
        z = F.dropout(F.glu(self._linear(z, p + "l1", store)), rate, drop, self.rng)
        z = self._linear(z, p + "l2", store)
        if teacher:
            # normalize with running stats, then fold the teacher batch into them
            out = F.batch_norm_nonaffine(z, self.bn_teacher, training=False)
            if training:
                F.batch_norm_nonaffine(F.detach(z), self.bn_teacher, training=True)
            return out
        return F.batch_norm_nonaffine(z, self.bn_student, training)

    # -- array level API ------------------------------------------------

    def features_batch(self, tokens: np.ndarray) -> np.ndarray:
        x = Tensor(tokens if tokens.ndim == 3 else tokens[None])
        return self.extract(self.trunk(x, training=False)).data


def _as_token_arrays(ts) -> list[np.ndarray]:
    if isinstance(ts, TokenSet):
        return [ts.tokens]
    if isinstance(ts, np.ndarray):
        return [ts] if ts.ndim == 2 else list(ts)
    return [t.tokens if isinstance(t, TokenSet) else np.asarray(t) for t in ts]


def forward_features(model: DeepELA, ts) -> np.ndarray:
    """Feature vector(s) in [-1, 1]^n_feat in inference mode.

    A single TokenSet gives shape (n_feat,); a sequence gives (len, n_feat).
    Token sets of equal size are batched together.
    """
    arrays = _as_token_arrays(ts)
    out = np.empty((len(arrays), model.cfg.n_feat), dtype=F.get_default_dtype())
    groups: dict[int, list[int]] = {}
    for i, a in enumerate(arrays):
        groups.setdefault(a.shape[0], []).append(i)
    for idx in groups.values():
        out[idx] = model.features_batch(np.stack([arrays[i] for i in idx]))
    return out[0] if isinstance(ts, TokenSet) else out


def forward_projection(model: DeepELA, ts, training: bool = False) -> np.ndarray:
    """Student projections (len, 8 n_feat); training mode uses batch statistics."""
    feats = forward_features(model, ts) if not training else None
    if training:
        x = Tensor(np.stack(_as_token_arrays(ts)))
        f = model.extract(model.trunk(x, training=True))
    else:
        f = Tensor(np.atleast_2d(feats))
    return model.head(f, training=training).data


def ema_update(teacher: dict[str, Tensor], student: dict[str, Tensor], momentum: float = 0.01) -> None:
    """teacher <- (1 - mu) teacher + mu student, for every ``teacher.<name>`` entry."""
    if not 0 < momentum <= 1:
        raise ValueError("EMA momentum must lie in (0, 1]")
    for name, t in teacher.items():
        src = student.get(name[len("teacher."):] if name.startswith("teacher.") else name)
        if src is None or src.shape != t.shape:
            raise ValueError(f"teacher tensor {name!r} has no matching student tensor")
        t.data = (1 - momentum) * t.data + momentum * src.data


# --------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian):
#   b"DELA" | u32 version | u32 len | config JSON (utf-8) | u32 n_records
#   n_records x ( u16 len | name | u8 dtype | u8 ndim | ndim x u32 | payload )
# dtype codes: 0 float32, 1 float64, 2 int64, 3 uint64

MAGIC = b"DELA"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("<u8")}
_CODES = {v.type: k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def config(self) -> BackboneConfig:
        return BackboneConfig.from_dict(self.meta["model"])


def atomic_write_bytes(path, payload: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(ck: Checkpoint) -> bytes:
    meta = json.dumps(ck.meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(ck.tensors))]
    for name, arr in ck.tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype.type)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CorruptCheckpointError(f"file truncated at byte {pos} (wanted {n} more)")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CorruptCheckpointError("bad magic; not a DELA checkpoint")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    try:
        meta = json.loads(take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable config block: {exc}") from exc
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8", errors="replace")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CorruptCheckpointError(f"unknown dtype code {code} for {name!r}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[code]
        size = int(np.prod(shape)) * dt.itemsize
        tensors[name] = np.frombuffer(take(size), dtype=dt).reshape(shape).copy()
    if pos != len(buf):
        raise CorruptCheckpointError(f"{len(buf) - pos} trailing bytes after last record")
    return Checkpoint(meta, tensors)


def model_state(model: DeepELA) -> dict[str, np.ndarray]:
    out = {n: t.data for n, t in model.params.items()}
    out.update({n: t.data for n, t in model.teacher.items()})
    for tag, st in (("bn.student", model.bn_student), ("bn.teacher", model.bn_teacher)):
        out[f"{tag}.running_mean"] = st.running_mean
        out[f"{tag}.running_var"] = st.running_var
    return out


def save_checkpoint(path, model: DeepELA, extra_meta: dict | None = None,
                    extra_tensors: dict[str, np.ndarray] | None = None) -> None:
    """Write model weights, teacher, batch-norm and RNG state (plus optional extras) atomically."""
    meta = {"model": dataclasses.asdict(model.cfg), "rng": model.rng.bit_generator.state,
            "dtype": np.dtype(F.get_default_dtype()).name}
    meta.update(extra_meta or {})
    tensors = model_state(model)
    tensors.update(extra_tensors or {})
    atomic_write_bytes(path, encode_checkpoint(Checkpoint(_jsonable(meta), tensors)))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(buf)


def model_from_checkpoint(ck: Checkpoint, cfg: BackboneConfig | None = None) -> DeepELA:
    """Rebuild a model; if ``cfg`` is given, stored tensors must match its shapes."""
    cfg = ck.config if cfg is None else cfg
    model = DeepELA(cfg)
    expected = model_state(model)
    for name, ref in expected.items():
        if name not in ck.tensors:
            raise ShapeMismatchError(f"tensor {name!r} missing from checkpoint")
        if ck.tensors[name].shape != ref.shape:
            raise ShapeMismatchError(
                f"tensor {name!r} has shape {ck.tensors[name].shape}, config expects {ref.shape}")
    dtype = F.get_default_dtype()
    for name, t in list(model.params.items()) + list(model.teacher.items()):
        t.data = ck.tensors[name].astype(dtype)
    for tag, st in (("bn.student", model.bn_student), ("bn.teacher", model.bn_teacher)):
        st.running_mean = ck.tensors[f"{tag}.running_mean"].astype(dtype)
        st.running_var = ck.tensors[f"{tag}.running_var"].astype(dtype)
    if "rng" in ck.meta:
        model.rng.bit_generator.state = ck.meta["rng"]
    return model


def tokens_for(cfg: BackboneConfig, samples: Iterable, stride: int | None = None) -> list[TokenSet]:
    from .tokenizer import tokenize

    s = cfg.stride if stride is None else stride
    return [tokenize(smp, cfg.k, cfg.nu, s) for smp in samples]


def token_batch(tss: Sequence[TokenSet]) -> np.ndarray:
    sizes = {t.n_tokens for t in tss}
    if len(sizes) != 1:
        raise ValueError(f"batched token sets must share a size, got {sorted(sizes)}")
    return np.stack([t.tokens for t in tss])
