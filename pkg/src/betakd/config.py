"""JSON experiment configuration with strict key checking."""
from __future__ import annotations

import copy
import json
import re
from dataclasses import asdict, dataclass, field, fields

from .divergences import DivergenceSpec, Kind
from .errors import ConfigError

STRATEGIES = ("unweighted", "manual", "beta_task", "beta_instance")


@dataclass
class SourceConfig:
    vocab: int = 32
    order: int = 2
    alpha: float = 0.3
    seed: int = 0


@dataclass
class TeacherSettings:
    embed_dim: int = 32
    hidden_dim: int = 64
    n_layers: int = 2
    steps: int = 6000
    lr: float = 1e-2
    batch_size: int = 32
    seed: int = 0
    checkpoint: str | None = None


@dataclass
class StudentSettings:
    embed_dim: int = 16
    hidden_dim: int = 16
    n_layers: int = 1


@dataclass
class ChannelConfig:
    kind: str = "fkl"
    strategy: str = "unweighted"
    dim_scale: float = 1.0
    teacher_temp: float = 1.0
    student_temp: float = 1.0
    skew_lambda: float | None = None
    # fixed weight for the manual strategy; derived from initial scales when null
    weight: float | None = None
    name: str | None = None

    def spec(self):
        kind = Kind(self.kind)
        lam = self.skew_lambda if kind.is_skew else None
        return DivergenceSpec(kind, lam, self.teacher_temp, self.student_temp)

    @property
    def channel_name(self):
        return self.name or self.kind


@dataclass
class OptimizerSettings:
    kind: str = "adam"
    lr: float = 3e-3
    beta_lr: float = 1e-2


@dataclass
class ExperimentConfig:
    source: SourceConfig = field(default_factory=SourceConfig)
    teacher: TeacherSettings = field(default_factory=TeacherSettings)
    student: StudentSettings = field(default_factory=StudentSettings)
    channels: list = field(default_factory=lambda: [ChannelConfig()])
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    steps: int = 2000
    batch_size: int = 32
    seq_len: int = 24
    train_sequences: int = 2048
    eval_sequences: int = 512
    eval_every: int = 100
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3])
    ce_temp: float = 1.0
    feature_dim: int = 16
    beta_hidden: int = 32
    beta_min: float = 1e-4
    beta_max: float = 1e4
    record_timing: bool = False
    output_dir: str = "runs/default"

    def to_dict(self):
        return asdict(self)

    def copy(self):
        return copy.deepcopy(self)


_NESTED = {
    "source": SourceConfig,
    "teacher": TeacherSettings,
    "student": StudentSettings,
    "optimizer": OptimizerSettings,
}


def _line_of(text, key):
    if text is None:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _err(msg, key, text):
    line = _line_of(text, key)
    where = f" (line {line})" if line else ""
    return ConfigError(f"config key '{key}'{where}: {msg}")


def _build(cls, data, path, text):
    if not isinstance(data, dict):
        raise _err("expected an object", path or "<root>", text)
    names = {f.name for f in fields(cls)}
    for key in data:
        if key not in names:
            raise _err("unknown key", key, text)
    kwargs = {}
    for key, value in data.items():
        if cls is ExperimentConfig and key in _NESTED:
            value = _build(_NESTED[key], value, key, text)
        elif cls is ExperimentConfig and key == "channels":
            if not isinstance(value, list):
                raise _err("expected a list of channels", key, text)
            value = [_build(ChannelConfig, c, key, text) for c in value]
        kwargs[key] = value
    return cls(**kwargs)


def validate(cfg, text=None):
    if not cfg.channels:
        raise _err("at least one distillation channel is required", "channels", text)
    kinds = []
    for ch in cfg.channels:
        try:
            kind = Kind(ch.kind)
        except ValueError:
            raise _err(f"unknown divergence kind {ch.kind!r}", "kind", text) from None
        if ch.strategy not in STRATEGIES:
            raise _err(f"unknown strategy {ch.strategy!r}", "strategy", text)
        if not ch.dim_scale > 0:
            raise _err("must be positive", "dim_scale", text)
        if ch.weight is not None and not ch.weight > 0:
            raise _err("manual weights must be positive", "weight", text)
        try:
            ch.spec()
        except ValueError as exc:
            raise _err(str(exc), "kind", text) from None
        kinds.append(kind)
    if sum(k.is_feature for k in kinds) > 1:
        raise _err("at most one feature channel is allowed", "channels", text)
    names = [c.channel_name for c in cfg.channels]
    if len(set(names)) != len(names):
        raise _err("channel names must be unique", "channels", text)
    if not cfg.seeds:
        raise _err("at least one seed is required", "seeds", text)
    for key in ("batch_size", "train_sequences", "eval_sequences", "eval_every"):
        if not getattr(cfg, key) >= 1:
            raise _err("must be at least 1", key, text)
    if cfg.steps < 0:
        raise _err("must be non-negative", "steps", text)
    if cfg.seq_len <= cfg.source.order:
        raise _err("must exceed the source order", "seq_len", text)
    if cfg.optimizer.kind not in ("adam", "sgd"):
        raise _err(f"unknown optimizer {cfg.optimizer.kind!r}", "kind", text)
    return cfg


def from_dict(data, text=None):
    return validate(_build(ExperimentConfig, data, None, text), text)


def loads(text):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return from_dict(data, text)


def load(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text)


def dumps(cfg):
    return json.dumps(cfg.to_dict(), indent=2) + "\n"
