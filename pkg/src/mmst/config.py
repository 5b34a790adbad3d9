"""Run configuration: defaults < ``key=value`` file < command-line flags."""
from __future__ import annotations

import copy
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .fusion import FusionConfig
from .structured import StructuredConfig
from .swin import SwinConfig
from .synth import SynthSpec
from .training import TrainConfig

SECTIONS = ("swin", "structured", "fusion", "train", "synth")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    preset: str = "default"
    swin: SwinConfig = field(default_factory=SwinConfig)
    structured: StructuredConfig = field(default_factory=StructuredConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)

    def validate(self) -> None:
        self.swin.validate()
        self.structured.validate()
        self.fusion.validate()
        self.train.validate()
        if self.swin.out_dim != self.fusion.feature_dim or \
                self.structured.out_dim != self.fusion.feature_dim:
            raise ConfigError("swin.out_dim, structured.out_dim and fusion.feature_dim must agree")

    def copy(self) -> "RunConfig":
        return copy.deepcopy(self)


def desk_config(**top) -> RunConfig:
    """Small configuration sized for a single laptop core (32-wide features)."""
    cfg = RunConfig(preset="desk", **top)
    cfg.swin = SwinConfig.desk()
    cfg.structured.out_dim = cfg.swin.out_dim
    cfg.fusion.feature_dim = cfg.swin.out_dim
    cfg.train.learning_rate = 5e-4
    cfg.train.batch_size = 32
    cfg.train.epochs = 40
    cfg.train.weight_decay = 0.05
    return cfg


def full_config(**top) -> RunConfig:
    cfg = RunConfig(preset="full", **top)
    cfg.swin = SwinConfig.full_scale()
    cfg.train.epochs = 200
    return cfg


PRESETS = {"default": RunConfig, "desk": desk_config, "full": full_config}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, dict):
        return ",".join(f"{k}:{_format(v)}" for k, v in value.items())
    if isinstance(value, (list, tuple)):
        return ",".join(_format(v) for v in value)
    return str(value)


def _parse_scalar(text: str, kind):
    if kind is bool:
        lowered = text.strip().lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def _parse(text: str, hint):
    origin = typing.get_origin(hint)
    if origin is list:
        (elem,) = typing.get_args(hint)
        return [_parse_scalar(t, elem) for t in text.split(",")] if text.strip() else []
    if origin is dict:
        _, elem = typing.get_args(hint)
        out = {}
        for item in filter(None, text.split(",")):
            key, _, val = item.partition(":")
            out[key.strip()] = _parse_scalar(val, elem)
        return out
    return _parse_scalar(text, hint)


def flatten(cfg: RunConfig) -> dict[str, str]:
    flat = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for sub in dataclasses.fields(value):
                flat[f"{f.name}.{sub.name}"] = _format(getattr(value, sub.name))
        else:
            flat[f.name] = _format(value)
    return flat


def to_text(cfg: RunConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in flatten(cfg).items())


def set_value(cfg: RunConfig, key: str, text: str) -> None:
    """Assign one flattened key; unknown keys raise ConfigError."""
    owner, name = cfg, key
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown config key {key!r}")
        owner = getattr(cfg, section)
    hints = typing.get_type_hints(type(owner))
    if name not in hints or dataclasses.is_dataclass(getattr(owner, name)):
        raise ConfigError(f"unknown config key {key!r}")
    try:
        setattr(owner, name, _parse(text, hints[name]))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def parse_lines(text: str) -> dict[str, str]:
    out = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def from_text(text: str, base: RunConfig | None = None) -> RunConfig:
    values = parse_lines(text)
    cfg = base.copy() if base is not None else build_preset(values.get("preset", "default"))
    for key, value in values.items():
        set_value(cfg, key, value)
    return cfg


def build_preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()


def resolve(preset: str = "default", config_file: str | None = None,
            overrides: dict[str, str] | None = None) -> RunConfig:
    """Layer defaults (from the preset), then the config file, then flag overrides."""
    file_values = parse_lines(Path(config_file).read_text(encoding="utf-8")) if config_file else {}
    cfg = build_preset(file_values.pop("preset", preset) if preset == "default" else preset)
    for key, value in file_values.items():
        set_value(cfg, key, value)
    for key, value in (overrides or {}).items():
        set_value(cfg, key, value)
    return cfg
