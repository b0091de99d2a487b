"""Plain-text ``key = value`` experiment configuration.

Lists are comma separated; ``#`` starts a comment.  Every key maps to a
field of :class:`ExperimentConfig`; unknown keys are rejected by name.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Optional

from .errors import ConfigError
from .layers import MODES

CONFIG_VERSION = 1


@dataclass
class ExperimentConfig:
    # methods x targets x seeds form the run matrix
    mode: tuple = ("dsgd", "mixstyle", "dsu", "styleddg")
    targets: tuple = (0, 1, 2, 3)
    seeds: tuple = (0, 1, 2)
    # graph
    graph: str = "complete"
    m: int = 3
    radius: float = 0.8
    radii: tuple = (0.5, 0.8, 1.2)
    edges_file: str = ""
    # model
    channels: tuple = (8, 16, 32)
    kernel: int = 3
    pool: int = 2
    hooks: tuple = (1, 2)  # the block feeding the pooled head is left unhooked
    # data
    classes: int = 5
    image_size: int = 16
    train_per_domain: int = 600
    test_per_domain: int = 300
    data_seed: int = 0
    dataset: str = ""  # optional path to a dumped dataset
    # optimisation
    K: int = 600
    batch_size: int = 32
    lr: float = 0.2
    lr_schedule: str = "cosine"
    # style layers
    p_ell: float = 0.5
    alpha_explore: float = 3.0
    lambda_a: float = 0.1
    lambda_b: float = 0.1
    noise_scale: float = 1.0
    eps_var: float = 1e-5
    # logging
    eval_every: int = 0
    probe_every: int = 0
    probe_size: int = 128
    checkpoints: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for m in self.mode:
            if m not in MODES:
                raise ConfigError(f"mode: unknown method {m!r}")
        if self.graph not in ("complete", "ring", "random_geometric", "custom"):
            raise ConfigError(f"graph: unknown kind {self.graph!r}")
        if self.graph == "custom" and not self.edges_file:
            raise ConfigError("edges_file: required for a custom graph")
        if self.m < 1:
            raise ConfigError("m: need at least one device")
        if self.K < 0:
            raise ConfigError("K: must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be positive")
        if "styleddg" in self.mode and self.batch_size % 2:
            raise ConfigError(f"batch_size: must be even for styleddg, got {self.batch_size}")
        if not 0.0 <= self.p_ell <= 1.0:
            raise ConfigError("p_ell: must lie in [0, 1]")
        if self.lr_schedule not in ("theorem", "cosine", "constant"):
            raise ConfigError(f"lr_schedule: unknown schedule {self.lr_schedule!r}")
        if not self.targets or not self.seeds or not self.mode:
            raise ConfigError("mode, targets and seeds must be non-empty")

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _default(name: str):
    return _FIELDS[name].default


def _parse_scalar(kind: type, key: str, text: str):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def parse_value(key: str, text: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    d = _default(key)
    if isinstance(d, tuple):
        elem = type(d[0]) if d else str
        return tuple(_parse_scalar(elem, key, t) for t in text.split(",") if t.strip())
    return _parse_scalar(type(d), key, text)


def _pairs(lines: Iterable[str], origin: str):
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected key = value, got {raw.strip()!r}")
        k, v = line.split("=", 1)
        yield k.strip(), v.strip()


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    values = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} not found")
        for k, v in _pairs(p.read_text().splitlines(), str(p)):
            values[k] = parse_value(k, v)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like KEY=VAL")
        k, v = item.split("=", 1)
        values[k.strip()] = parse_value(k.strip(), v)
    return ExperimentConfig(**values)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    out = [f"# styleddg experiment config v{CONFIG_VERSION}"]
    out += [f"{f.name} = {_fmt(getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(out) + "\n"
