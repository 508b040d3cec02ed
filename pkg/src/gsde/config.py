"""Experiment configuration and the flat ``dotted.key = value`` file format."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .losses import MixMatchConfig


class ConfigError(ValueError):
    pass


@dataclass
class AblationFlags:
    no_reinit: bool = False
    no_expansion: bool = False
    disable_AD: bool = False
    disable_MS: bool = False
    disable_SS: bool = False
    disable_scoring_extras: bool = False
    mixmatch_pseudo_as_unlabeled: bool = False


@dataclass
class DataConfig:
    """CSV paths; when both are unset the built-in rotated two-moons benchmark is used."""

    source: Optional[str] = None
    target: Optional[str] = None
    n: int = 1000
    noise: float = 0.15
    rotation: float = 30.0
    seed: int = 0


@dataclass
class ExperimentConfig:
    max_runs: int = 5
    iterations_per_run: int = 1000
    batch_size: int = 32
    learning_rate: float = 0.5
    lr_gamma: float = 10.0
    lr_power: float = 0.75
    weight_decay: float = 5e-4
    disc_lr_mult: float = 1.0
    bottlenecks: int = 5
    hidden: int = 64
    bottleneck_dim: int = 16
    disc_hidden: int = 64
    extractor_layers: int = 2
    neighbors: int = 5
    lp_lambda: float = 1.0
    lp_neighbors: int = 10
    lp_target_anchor: str = "probs"
    theta: float = 0.7
    grl_gamma: float = 10.0
    eval_interval: int = 50
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    experiment_id: str = "gsde"
    mixmatch: MixMatchConfig = field(default_factory=MixMatchConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "ExperimentConfig":
        if self.max_runs < 1:
            raise ConfigError("max_runs must be >= 1")
        if self.iterations_per_run < 1:
            raise ConfigError("iterations_per_run must be >= 1")
        if self.batch_size < 1 or self.eval_interval < 1:
            raise ConfigError("batch_size and eval_interval must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.bottlenecks < 1:
            raise ConfigError("bottlenecks must be >= 1")
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError("theta must lie in [0, 1]")
        if self.lp_target_anchor not in ("probs", "zero"):
            raise ConfigError("lp_target_anchor must be 'probs' or 'zero'")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        return self


def _coerce(raw: str, typ, key: str):
    origin = typing.get_origin(typ)
    if origin is typing.Union:
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if raw.lower() in ("", "none", "null"):
            return None
        return _coerce(raw, args[0], key)
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if typ is list or origin is list:
            return [int(v) for v in raw.replace(" ", "").split(",") if v]
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(f"{key}: unsupported field type {typ}")


def set_value(cfg: ExperimentConfig, key: str, raw: str) -> None:
    """Assign ``raw`` to a dotted key such as ``ablation.no_expansion``."""
    obj = cfg
    parts = key.strip().split(".")
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or not hasattr(obj, part):
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(obj, part)
    name = parts[-1]
    hints = typing.get_type_hints(type(obj)) if dataclasses.is_dataclass(obj) else {}
    if name not in hints or dataclasses.is_dataclass(getattr(obj, name)):
        raise ConfigError(f"unknown config key {key!r}")
    setattr(obj, name, _coerce(raw.strip(), hints[name], key))


def parse_config(text: str, overrides=()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        try:
            set_value(cfg, key, value)
        except ConfigError as e:
            raise ConfigError(f"line {lineno}: {e}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        set_value(cfg, key, value)
    try:
        cfg.mixmatch.__post_init__()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return cfg.validate()


def load_config(path, overrides=()) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), overrides)


def dump_config(cfg: ExperimentConfig, prefix: str = "") -> list[str]:
    """Flatten to ``key = value`` lines; inverse of :func:`parse_config`."""
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            lines.extend(dump_config(v, prefix + f.name + "."))
        elif isinstance(v, list):
            lines.append(f"{prefix}{f.name} = {','.join(str(x) for x in v)}")
        else:
            lines.append(f"{prefix}{f.name} = {'' if v is None else str(v).lower() if isinstance(v, bool) else v}")
    return lines
