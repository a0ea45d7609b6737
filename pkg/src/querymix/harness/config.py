"""Run configuration: a nested dataclass tree serialized to and from a flat
`key = value` text format with dotted paths and # comments.

Parsing starts from the defaults and applies overrides, so a config file only
needs the keys it changes; serialize-then-parse is lossless.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, is_dataclass

from ..errors import ContractError, ParseError
from ..model import ModelConfig
from ..scenes import BenchmarkParams


@dataclass
class OptimizerConfig:
    # 1e-3 reaches useful mAP within ~5k steps at benchmark scale; 1e-4
    # is an order of magnitude too slow for from-scratch training here
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip: float = 0.1


@dataclass
class ScheduleConfig:
    epochs: int = 50
    batch_size: int = 16
    lr_drop_epoch: int = 0    # 0 -> 80% of epochs


@dataclass
class DataConfig:
    train_path: str = ""      # empty -> generate procedurally
    val_path: str = ""
    train_scenes: int = 2000
    val_scenes: int = 500
    num_types: int = 4
    num_classes: int = 6
    max_objects: int = 8
    image_size: int = 64
    noise_sigma: float = 0.05
    background_tint: bool = True
    data_seed: int = 7777


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    beta: float = 1.0
    seed: int = 0

    def validate(self) -> "RunConfig":
        self.model.validate()
        opt, sched = self.optimizer, self.schedule
        if opt.learning_rate <= 0 or opt.weight_decay < 0 or opt.grad_clip <= 0:
            raise ContractError("optimizer rates must be positive")
        if sched.epochs < 1 or sched.batch_size < 1:
            raise ContractError("schedule needs epochs >= 1 and batch_size >= 1")
        if not 0 <= sched.lr_drop_epoch <= sched.epochs:
            raise ContractError(
                f"lr_drop_epoch {sched.lr_drop_epoch} outside [0, {sched.epochs}]")
        if self.beta < 0:
            raise ContractError(f"beta must be nonnegative, got {self.beta}")
        if self.seed < 0 or self.data.data_seed < 0:
            raise ContractError("seeds must be nonnegative integers")
        if self.model.num_classes != self.data.num_classes:
            raise ContractError(
                f"model has {self.model.num_classes} classes but the data config "
                f"declares {self.data.num_classes}")
        if self.model.image_size != self.data.image_size:
            raise ContractError(
                f"model image size {self.model.image_size} != data {self.data.image_size}")
        return self

    def lr_drop(self) -> int:
        """Epoch after which the learning rate is scaled by 0.1."""
        explicit = self.schedule.lr_drop_epoch
        return explicit if explicit > 0 else max(1, int(round(0.8 * self.schedule.epochs)))

    def benchmark_params(self) -> BenchmarkParams:
        d = self.data
        return BenchmarkParams(num_types=d.num_types, num_classes=d.num_classes,
                               max_objects=d.max_objects, image_size=d.image_size,
                               noise_sigma=d.noise_sigma,
                               background_tint=d.background_tint)


def default_config() -> RunConfig:
    return RunConfig()


# ---------------------------------------------------------------------------
# flat key = value serialization

def _leaves(obj, prefix: str = ""):
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}.{f.name}" if prefix else f.name
        if is_dataclass(value):
            yield from _leaves(value, key)
        else:
            yield key, value


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(text: str, template, key: str, line: int):
    try:
        if isinstance(template, bool):
            if text not in ("true", "false"):
                raise ValueError(text)
            return text == "true"
        if isinstance(template, int):
            return int(text)
        if isinstance(template, float):
            return float(text)
        if isinstance(template, (tuple, list)):
            return tuple(int(v) for v in text.split(",")) if text else ()
        return text
    except ValueError:
        raise ParseError(f"bad value {text!r} for {key}", line=line)


def config_to_text(config: RunConfig) -> str:
    lines = ["# run configuration"]
    lines += [f"{key} = {_format_value(value)}" for key, value in _leaves(config)]
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> RunConfig:
    config = default_config()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw!r}", line=lineno)
        key, _, value = (p.strip() for p in line.partition("="))
        obj = config
        parts = key.split(".")
        for part in parts[:-1]:
            if not is_dataclass(getattr(obj, part, None)):
                raise ParseError(f"unknown config section {key!r}", line=lineno)
            obj = getattr(obj, part)
        leaf = parts[-1]
        if not hasattr(obj, leaf) or is_dataclass(getattr(obj, leaf)):
            raise ParseError(f"unknown config key {key!r}", line=lineno)
        template = getattr(obj, leaf)
        setattr(obj, leaf, _parse_value(value, template, key, lineno))
    return config


def read_config(path) -> RunConfig:
    with open(path, "r", encoding="ascii") as fh:
        return parse_config(fh.read())


def write_config(config: RunConfig, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(config_to_text(config))
