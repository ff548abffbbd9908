"""Run configuration: flat ``section.key = value`` files with overrides.

Every field has a default, so an empty file is a complete configuration.
Unknown keys are rejected. ``to_text`` writes a canonical snapshot that
``parse_text`` reads back into an equal object.
"""
from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable

from .encoders import EncoderConfig
from .errors import ConfigError, HiCroPLError
from .harness.data import DatasetSpec
from .harness.training import Hyperparams, PretrainConfig
from .promptflow import FlowConfig


@dataclass(frozen=True)
class SplitConfig:
    holdout: float = 0.5
    rule: str = "compositional"
    seed: int = 0
    train_fraction: float = 0.5

    def __post_init__(self):
        if not 0 < self.holdout < 1 or not 0 < self.train_fraction < 1:
            raise ConfigError("split.holdout and split.train_fraction must lie in (0, 1)")
        if self.rule not in ("compositional", "random"):
            raise ConfigError(f"unknown split rule {self.rule!r}")


@dataclass(frozen=True)
class PathsConfig:
    dataset: str = ""
    teacher: str = ""
    prompts: str = ""
    out: str = "runs/default"


@dataclass(frozen=True)
class AblateConfig:
    grid: str = "flow"
    seeds: int = 5
    workers: int = 1

    def __post_init__(self):
        if self.seeds < 1 or self.workers < 1:
            raise ConfigError("ablate.seeds and ablate.workers must be positive")


SECTIONS = {
    "encoder": EncoderConfig,
    "data": DatasetSpec,
    "split": SplitConfig,
    "flow": FlowConfig,
    "train": Hyperparams,
    "pretrain": PretrainConfig,
    "paths": PathsConfig,
    "ablate": AblateConfig,
}

ALIASES = {
    "encoder.L": "encoder.layers",
    "encoder.m": "encoder.prompt_len",
    "encoder.d_t": "encoder.text_width",
    "encoder.d_v": "encoder.vision_width",
    "train.lambda": "train.consistency_weight",
    "train.K": "train.shots",
    "train.K_shots": "train.shots",
    "train.momentum_beta1": "train.beta1",
    "train.prompt_len": "encoder.prompt_len",
    "flow.boundary_k": "train.boundary_k",
    "train.k": "train.boundary_k",
}


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    split: SplitConfig = field(default_factory=SplitConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    train: Hyperparams = field(default_factory=Hyperparams)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def items(self) -> Iterable[tuple[str, object]]:
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                yield f"{section}.{f.name}", getattr(obj, f.name)

    def to_text(self) -> str:
        return "".join(f"{key} = {format_value(value)}\n" for key, value in self.items())

    def with_updates(self, updates: dict[str, str]) -> "RunConfig":
        """Apply raw string values keyed by ``section.field`` (aliases allowed)."""
        grouped: dict[str, dict[str, object]] = {}
        for raw_key, raw_value in updates.items():
            key = ALIASES.get(raw_key, raw_key)
            section, _, name = key.partition(".")
            cls = SECTIONS.get(section)
            hints = typing.get_type_hints(cls) if cls else {}
            if cls is None or name not in {f.name for f in fields(cls)}:
                raise ConfigError(f"unknown configuration key {raw_key!r}")
            grouped.setdefault(section, {})[name] = parse_value(raw_key, raw_value, hints[name])
        changes = {}
        for section, values in grouped.items():
            try:
                changes[section] = replace(getattr(self, section), **values)
            except (TypeError, ValueError) as exc:
                if isinstance(exc, HiCroPLError):
                    raise
                raise ConfigError(f"invalid {section} settings: {exc}") from exc
        return replace(self, **changes)


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(key: str, text: str, hint):
    text = text.strip()
    try:
        if hint is bool:
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if typing.get_origin(hint) is tuple:
            return tuple(part.strip() for part in text.split(",") if part.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def parse_lines(lines: Iterable[str], origin: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for number, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{origin}:{number}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def parse_overrides(pairs: Iterable[str]) -> dict[str, str]:
    return parse_lines(pairs, "--set")


def parse_text(text: str) -> RunConfig:
    return RunConfig().with_updates(parse_lines(text.splitlines()))


def load_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults, then the file (if any), then ``--set`` overrides."""
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        cfg = cfg.with_updates(parse_lines(text.splitlines(), str(path)))
    return cfg.with_updates(parse_overrides(overrides))
