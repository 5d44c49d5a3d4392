"""Run configuration: dataclasses, ``section.key = value`` files, CLI overrides."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigError
from ..model import FusionConfig, ModelConfig
from ..synth import TASK_KINDS


@dataclass
class TrainConfig:
    optimizer: str = "sgd"  # "sgd" or "adam"
    lr: float = 0.1
    momentum: float = 0.0
    batch_size: int = 32
    steps: int = 3000
    seed: int = 0
    precision: str = "float32"  # "float32" or "float64"
    mix_detail: float = 0.4
    mix_semantic: float = 0.4
    mix_compositional: float = 0.2
    eval_every: int = 500
    eval_samples: int = 256  # per task kind, validation range
    train_seed_start: int = 0
    val_seed_start: int = 1_000_000_000
    test_seed_start: int = 2_000_000_000
    grad_clip: float = 1.0

    @property
    def mixture(self) -> dict[str, float]:
        return dict(zip(TASK_KINDS, (self.mix_detail, self.mix_semantic, self.mix_compositional)))

    @property
    def train_seed_range(self) -> range:
        return range(self.train_seed_start, self.train_seed_start + self.steps * self.batch_size)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "RunConfig":
        t = self.train
        if t.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {t.optimizer!r}")
        if t.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {t.precision!r}")
        if t.batch_size < 1 or t.steps < 0 or t.lr <= 0:
            raise ConfigError("batch_size >= 1, steps >= 0 and lr > 0 required")
        weights = list(t.mixture.values())
        if any(w < 0 for w in weights) or sum(weights) <= 0:
            raise ConfigError("task mixture weights must be non-negative and not all zero")
        self.model.vocab.validate()
        self.fusion.plan(self.model)
        return self

    # -- text form ----------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for section in ("model", "fusion", "train"):
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                value = getattr(obj, f.name)
                lines.append(f"{section}.{f.name} = {_format(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            cfg.set(key, value)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)

    def set(self, key: str, value: str) -> None:
        if "." not in key:
            raise ConfigError(f"config key {key!r} must be section.name")
        section, name = key.split(".", 1)
        obj = getattr(self, section, None)
        if obj is None or not dataclasses.is_dataclass(obj):
            raise ConfigError(f"unknown config section {section!r}")
        hints = typing.get_type_hints(type(obj))
        if name not in hints:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(obj, name, _parse(value, hints[name], key))

    def apply_overrides(self, overrides) -> "RunConfig":
        for item in overrides or ():
            if "=" not in item:
                raise ConfigError(f"override {item!r} must be key=value")
            key, value = item.split("=", 1)
            self.set(key.strip(), value.strip())
        return self

    def copy(self) -> "RunConfig":
        return RunConfig.from_text(self.to_text())


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse(text: str, hint, key: str):
    args = typing.get_args(hint)
    optional = type(None) in args
    if optional:
        if text.lower() in ("none", ""):
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text.replace("_", ""))
        if hint is float:
            return float(text)
        if hint is str:
            return text
    except ValueError as exc:
        raise ConfigError(f"bad value {text!r} for {key}") from exc
    raise ConfigError(f"unsupported type {hint} for {key}")
