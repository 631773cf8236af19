"""Experiment configuration: typed sections, YAML parse/serialize, validation."""

from __future__ import annotations

import dataclasses
import math
import types
import typing
from dataclasses import dataclass, field

import yaml

from . import conceptlab as cl
from .errors import ConfigError
from .hypernet import INITS, VARIANTS, depth_lr

LR_RULES = ("constant", "depth-sqrt")


@dataclass
class ModelSection:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 128
    layer: int | None = None  # intervention layer; None = n_layers // 2


@dataclass
class PretrainSection:
    steps: int = 4000
    batch_size: int = 64
    lr: float = 3e-3
    n_lines: int = 100000
    instructed_fraction: float = 0.6
    soft_fraction: float = 0.5


@dataclass
class HypernetSection:
    variant: str = "CrossAttention"
    n_blocks: int = 2
    n_heads: int = 4
    n_cross_heads: int = 4
    init: str = "pretrained-from-base"
    unit_norm_output: bool = False


@dataclass
class TrainSection:
    lr: float = 5e-4
    lr_rule: str = "constant"
    batch_size: int = 32
    steps: int = 1500
    epochs: float | None = None
    alpha: float = 1.0
    eval_every: int = 0


@dataclass
class DataSection:
    families: list = field(default_factory=lambda: list(cl.FAMILIES))
    n_concepts: int = 32
    n_train: int = 72
    n_eval: int = 10
    heldout_fraction: float = 0.2
    seed: int = 0


@dataclass
class BaselineSection:
    method: str = "reft-r1"
    steps: int = 300
    batch_size: int = 24
    lr: float = 1e-2
    lam: float = 0.05
    k: int = 8


@dataclass
class SweepSection:
    sizes: list = field(default_factory=lambda: [2, 8, 32])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    depths: list = field(default_factory=lambda: [2, 4, 8, 20])
    inits: list = field(default_factory=lambda: list(INITS))
    depth_base_lr: float = 3e-4
    flops_sizes: list = field(default_factory=lambda: [4, 16, 64])
    target_loss: float = 0.3


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs"
    factor_grid: list = field(default_factory=lambda: [0.0, 0.5, 1.0, 2.0, 4.0, 8.0])
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    hypernet: HypernetSection = field(default_factory=HypernetSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def __post_init__(self):
        validate(self)

    @property
    def layer(self) -> int:
        return self.model.n_layers // 2 if self.model.layer is None else self.model.layer

    def train_lr(self, n_blocks: int | None = None) -> float:
        n = self.hypernet.n_blocks if n_blocks is None else n_blocks
        if self.train.lr_rule == "depth-sqrt":
            return depth_lr(self.train.lr, n)
        return self.train.lr

    def train_steps(self, n_examples: int) -> int:
        if self.train.epochs is None:
            return self.train.steps
        return max(1, math.ceil(self.train.epochs * n_examples / self.train.batch_size))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``{"hypernet.variant": "NoContext"}``."""
        d = self.to_dict()
        for key, value in changes.items():
            node = d
            *path, last = key.replace("__", ".").split(".")
            for p in path:
                node = node[p]
            if last not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[last] = value
        return from_dict(d)


def _check(cond, key, msg):
    if not cond:
        raise ConfigError(f"{key}: {msg}")


def validate(cfg: ExperimentConfig) -> None:
    m, p, h, t, d, b, s = cfg.model, cfg.pretrain, cfg.hypernet, cfg.train, cfg.data, cfg.baseline, cfg.sweep
    for key, v in (("model.d_model", m.d_model), ("model.n_layers", m.n_layers), ("model.n_heads", m.n_heads),
                   ("model.d_ff", m.d_ff), ("model.max_seq_len", m.max_seq_len), ("hypernet.n_blocks", h.n_blocks),
                   ("hypernet.n_heads", h.n_heads), ("train.batch_size", t.batch_size),
                   ("pretrain.batch_size", p.batch_size), ("pretrain.n_lines", p.n_lines),
                   ("data.n_concepts", d.n_concepts), ("baseline.k", b.k), ("baseline.batch_size", b.batch_size)):
        _check(v >= 1, key, "must be >= 1")
    _check(m.d_model % m.n_heads == 0, "model.n_heads", "must divide d_model")
    _check(m.layer is None or 0 <= m.layer < m.n_layers, "model.layer", "outside [0, n_layers)")
    for key, v in (("train.lr", t.lr), ("pretrain.lr", p.lr), ("baseline.lr", b.lr)):
        _check(v > 0, key, "learning rate must be > 0")
    _check(t.lr_rule in LR_RULES, "train.lr_rule", f"must be one of {LR_RULES}")
    _check(t.epochs is None or t.epochs > 0, "train.epochs", "must be > 0")
    _check(t.steps >= 0 and p.steps >= 0 and b.steps >= 0, "steps", "must be >= 0")
    _check(h.variant in VARIANTS, "hypernet.variant", f"must be one of {VARIANTS}")
    _check(h.init in INITS, "hypernet.init", f"must be one of {INITS}")
    _check(not (h.unit_norm_output and h.variant == "CrossAttention"), "hypernet.unit_norm_output",
           "not allowed for CrossAttention")
    _check(h.variant != "CrossAttention" or h.n_cross_heads >= 1, "hypernet.n_cross_heads", "must be >= 1")
    _check(b.method in ("reft-r1", "diffmean", "prompt"), "baseline.method", "must be reft-r1, diffmean or prompt")
    _check(b.lam >= 0, "baseline.lam", "must be >= 0")
    _check(0.0 < d.heldout_fraction < 1.0, "data.heldout_fraction", "must lie in (0, 1)")
    _check(d.n_train >= 1 and d.n_eval >= 1, "data", "n_train and n_eval must be >= 1")
    unknown = [f for f in d.families if f not in cl.FAMILIES]
    _check(not unknown, "data.families", f"unknown families {unknown}")
    _check(bool(d.families), "data.families", "must be nonempty")
    _check(0.0 <= p.soft_fraction <= 1.0 and 0.0 <= p.instructed_fraction <= 1.0, "pretrain", "fractions in [0, 1]")
    _check(len(cfg.factor_grid) > 0 and 0.0 in [float(f) for f in cfg.factor_grid], "factor_grid", "must include 0")
    _check(all(n >= 1 for n in s.sizes + s.depths + s.flops_sizes), "sweep", "sizes and depths must be >= 1")
    _check(s.depth_base_lr > 0, "sweep.depth_base_lr", "learning rate must be > 0")
    _check(all(i in INITS for i in s.inits), "sweep.inits", f"must be drawn from {INITS}")
    _check(bool(s.seeds), "sweep.seeds", "must be nonempty")


# -- parsing ---------------------------------------------------------------------

def _coerce(value, tp, key):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if tp is list or origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, key)
    return value


def _build(cls, data, prefix=""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in names:
            raise ConfigError(f"unknown config key {prefix + str(k)!r}")
    kwargs = {}
    for k, v in data.items():
        kwargs[k] = _coerce(v, hints[k], prefix + k)
    if cls is ExperimentConfig and "factor_grid" in kwargs:
        kwargs["factor_grid"] = [_coerce(f, float, "factor_grid") for f in kwargs["factor_grid"]]
    return cls(**kwargs)


def from_dict(d: dict) -> ExperimentConfig:
    sections = {}
    top = dict(d or {})
    # sections are built first so key errors name the full dotted path
    hints = typing.get_type_hints(ExperimentConfig)
    for k in list(top):
        tp = hints.get(k)
        if tp is not None and dataclasses.is_dataclass(tp):
            sections[k] = _build(tp, top.pop(k), k + ".")
    cfg = _build(ExperimentConfig, top)
    for k, v in sections.items():
        setattr(cfg, k, v)
    validate(cfg)
    return cfg


def parse_config(text: str) -> ExperimentConfig:
    """Parse a YAML document; omitted keys take defaults, unknown keys are rejected."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    return from_dict(data)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def serialize_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)
