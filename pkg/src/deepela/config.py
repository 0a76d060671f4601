"""INI-style configuration with a fixed schema.

Sections ``[generator]``, ``[model]`` and ``[train]`` are recognized; any
unknown section or key is an error so typos surface immediately. Example::

    [generator]
    n = 1000
    dims = 2:1, 2:2, 3:1
    seed = 1

    [model]
    preset = tiny

    [train]
    batch_size = 64
    epochs = 40
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from typing import Any, Callable

from .model import PRESETS, BackboneConfig, preset
from .pretrain import AugmentationSpec, TrainConfig
from .randgen import GeneratorConfig


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _dims(v: str) -> list[tuple[int, int]]:
    out = []
    for part in v.split(","):
        d, m = part.strip().split(":")
        out.append((int(d), int(m)))
    return out


SCHEMA: dict[str, dict[str, Callable[[str], Any]]] = {
    "generator": {
        "n": int, "dims": _dims, "seed": int, "op_lower": int, "op_upper": int, "min_std": float,
        "value_cap": float, "probe_size": int, "retry_budget": int,
    },
    "model": {
        "preset": str, "nu": int, "k": int, "depth": int, "heads": int, "d_model": int, "n_feat": int,
        "stride": int, "dropout": float, "convention": str,
    },
    "train": {
        "batch_size": int, "tau": float, "epochs": int, "instances_per_epoch": int, "steps": int,
        "lr": float, "warmup_frac": float, "grad_accum": int, "ema_momentum": float,
        "bn_momentum": float, "multiplier": int, "d_min": int, "d_max": int, "m_min": int, "m_max": int,
        "seed": int, "corpus_size": int, "normalize": _bool, "rotate": _bool, "invert": _bool,
        "permute_columns": _bool, "independent_resample": _bool, "checkpoint_every": int,
    },
}


@dataclass
class Settings:
    generator: dict[str, Any] = field(default_factory=dict)
    model: dict[str, Any] = field(default_factory=dict)
    train: dict[str, Any] = field(default_factory=dict)

    def generator_config(self) -> tuple[GeneratorConfig, int, list[tuple[int, int]]]:
        g = dict(self.generator)
        n = g.pop("n", 1000)
        dims = g.pop("dims", [(2, 1)])
        lo, hi = g.pop("op_lower", 4), g.pop("op_upper", 32)
        try:
            cfg = GeneratorConfig(d=dims[0][0], op_bounds=(lo, hi), **g)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[generator] {exc}") from exc
        return cfg, n, dims

    def model_config(self, preset_name: str | None = None) -> BackboneConfig:
        m = dict(self.model)
        name = preset_name or m.pop("preset", "tiny")
        m.pop("preset", None)
        if name not in PRESETS:
            raise ConfigError(f"[model] unknown preset {name!r}")
        try:
            return preset(name, **m)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[model] {exc}") from exc

    def train_config(self, nu: int) -> tuple[TrainConfig, int | None, int]:
        t = dict(self.train)
        steps = t.pop("steps", None)
        every = t.pop("checkpoint_every", 0)
        aug = {k: t.pop(k) for k in ("rotate", "invert", "permute_columns", "independent_resample") if k in t}
        d_range = (t.pop("d_min", 2), t.pop("d_max", 3))
        m_range = (t.pop("m_min", 1), t.pop("m_max", 2))
        try:
            cfg = TrainConfig(nu=nu, d_range=d_range, m_range=m_range, augment=AugmentationSpec(**aug), **t)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[train] {exc}") from exc
        return cfg, steps, every


def parse_config(text: str, source: str = "<config>") -> Settings:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    settings = Settings()
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]; expected one of {sorted(SCHEMA)}")
        schema = SCHEMA[section]
        values = getattr(settings, section)
        for key, raw in cp.items(section):
            if key not in schema:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            try:
                values[key] = schema[key](raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for [{section}] {key} = {raw!r}: {exc}") from exc
    return settings


def load_config(path) -> Settings:
    if path is None:
        return Settings()
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))
