"""Experiment configuration: dataclass sections, `key = value` files and flag overrides.

Resolution order is built-in defaults, then the config file, then
command-line flags. Every key is ``section.field``; a few bare aliases
(see ``ALIASES``) are accepted for the most common knobs.
"""
from __future__ import annotations

import dataclasses
import hashlib
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Literal, Mapping

from ..data import DatasetSpec
from ..errors import ConfigError
from ..model import STUDENT_CONFIG, TEACHER_CONFIG, EncoderConfig
from ..training import TrainConfig, DistillVariant


@dataclass(frozen=True)
class PromptConfig:
    depth: int = 9
    length: int = 4
    student_depth: int = 9

    def validate(self) -> None:
        for name in ("depth", "length", "student_depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"prompts.{name} must be >= 1")


@dataclass(frozen=True)
class BackboneConfig:
    """Contrastive pretraining that stands in for downloaded dual-encoder weights."""
    teacher_steps: int = 1200
    student_steps: int = 1200
    lr: float = 1e-3
    batch_size: int = 32
    teacher_seed: int = 0
    student_seed: int = 1
    logit_scale: float = 100.0

    def validate(self) -> None:
        if self.teacher_steps < 0 or self.student_steps < 0:
            raise ConfigError("backbone step counts must be >= 0")
        if not self.lr > 0 or self.batch_size < 1 or not self.logit_scale > 0:
            raise ConfigError("backbone lr, batch_size and logit_scale must be positive")


@dataclass(frozen=True)
class ProtocolConfig:
    shots: int = 16
    pool_scope: Literal["full", "base_only"] = "full"
    images_per_class: int | None = None   # None keeps every training image
    table_mode: Literal["full", "split"] = "full"

    def validate(self) -> None:
        if self.shots < 1:
            raise ConfigError("protocol.shots must be >= 1")
        if self.images_per_class is not None and self.images_per_class < 1:
            raise ConfigError("protocol.images_per_class must be >= 1 or 'all'")
        if self.pool_scope not in ("full", "base_only"):
            raise ConfigError(f"protocol.pool_scope: unknown value {self.pool_scope!r}")
        if self.table_mode not in ("full", "split"):
            raise ConfigError(f"protocol.table_mode: unknown value {self.table_mode!r}")


@dataclass(frozen=True)
class DistillConfig:
    mode: str = "logit_kl"
    trainable: str = "prompts_and_projector"
    text_branch: str = "shared_cache"
    projector_layers: int = 2

    @property
    def variant(self) -> DistillVariant:
        return DistillVariant(self.mode, self.trainable, self.text_branch)

    def validate(self) -> None:
        self.variant.validate()
        if self.projector_layers < 1:
            raise ConfigError("distill.projector_layers must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    root: str = "runs"
    name: str = "reference"

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("run.seeds must list at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("run.seeds contains duplicates")


STAGE1_DEFAULT = TrainConfig()
STAGE2_DEFAULT = TrainConfig(augment=False)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    teacher: EncoderConfig = TEACHER_CONFIG
    student: EncoderConfig = STUDENT_CONFIG
    prompts: PromptConfig = field(default_factory=PromptConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    stage1: TrainConfig = STAGE1_DEFAULT
    stage2: TrainConfig = STAGE2_DEFAULT
    distill: DistillConfig = field(default_factory=DistillConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> "ExperimentConfig":
        for f in fields(self):
            section = getattr(self, f.name)
            try:
                section.validate()
            except ConfigError as exc:
                msg = str(exc)
                raise ConfigError(msg if msg.startswith(f"{f.name}.") else f"{f.name}: {msg}") from None
        if self.dataset.image_side != self.teacher.image_side or \
                self.dataset.image_side != self.student.image_side:
            raise ConfigError("dataset.image_side must equal patch_grid * patch_size of both encoders")
        return self

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in flatten(self).items())

    @property
    def hash(self) -> str:
        """Short content hash; every field participates except the artifact root and run name."""
        text = replace(self, run=replace(self.run, root="", name="")).to_text()
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        return apply_overrides(self, {k: v if isinstance(v, str) else format_value(v)
                                      for k, v in overrides.items()})


# Run seeds drive the stages; per-stage seed fields are not configurable.
EXCLUDED_KEYS = {"stage1.seed", "stage2.seed"}
ALIASES = {"tau": "stage2.tau", "epochs": "stage2.epochs", "seeds": "run.seeds"}


def _sections() -> dict[str, type]:
    hints = typing.get_type_hints(ExperimentConfig)
    return {f.name: hints[f.name] for f in fields(ExperimentConfig)}


def known_keys() -> list[str]:
    keys = []
    for section, cls in _sections().items():
        keys += [f"{section}.{f.name}" for f in fields(cls) if f"{section}.{f.name}" not in EXCLUDED_KEYS]
    return keys


def flatten(config: ExperimentConfig) -> dict[str, Any]:
    out = {}
    for section in _sections():
        obj = getattr(config, section)
        for f in fields(obj):
            key = f"{section}.{f.name}"
            if key not in EXCLUDED_KEYS:
                out[key] = getattr(obj, f.name)
    return out


def format_value(v: Any) -> str:
    if v is None:
        return "all"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(key: str, raw: str, annotation) -> Any:
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        raw = raw[1:-1]
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    try:
        if origin in (typing.Union, types.UnionType) and type(None) in args:
            if raw.lower() in ("all", "none"):
                return None
            inner = next(a for a in args if a is not type(None))
            return parse_value(key, raw, inner)
        if origin is Literal:
            if raw not in args:
                raise ConfigError(f"{key}: expected one of {list(args)}, got {raw!r}")
            return raw
        if origin is tuple:
            return tuple(parse_value(key, part, args[0]) for part in raw.split(",") if part.strip())
        if annotation is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if annotation is int:
            return int(raw)
        if annotation is float:
            return float(raw)
        if annotation is str:
            return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {getattr(annotation, '__name__', annotation)}") from None
    raise ConfigError(f"{key}: unsupported field type {annotation}")


def resolve_key(key: str) -> tuple[str, str]:
    key = ALIASES.get(key, key)
    if key in EXCLUDED_KEYS:
        raise ConfigError(f"{key}: per-stage seeds come from run.seeds")
    section, _, name = key.partition(".")
    sections = _sections()
    if section not in sections or not name:
        raise ConfigError(f"unknown config key {key!r}")
    if name not in {f.name for f in fields(sections[section])}:
        raise ConfigError(f"unknown config key {key!r}")
    return section, name


def apply_overrides(config: ExperimentConfig, overrides: Mapping[str, str]) -> ExperimentConfig:
    """Apply ``section.key -> raw string`` pairs and validate the result."""
    sections = _sections()
    grouped: dict[str, dict[str, Any]] = {}
    for key, raw in overrides.items():
        section, name = resolve_key(key)
        hints = typing.get_type_hints(sections[section])
        grouped.setdefault(section, {})[name] = parse_value(f"{section}.{name}", raw, hints[name])
    updates = {s: replace(getattr(config, s), **vals) for s, vals in grouped.items()}
    return replace(config, **updates).validate()


def parse_lines(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        resolve_key(key)
        out[ALIASES.get(key, key)] = value
    return out


def parse_config(path: str | Path | None = None, flags: Mapping[str, str] | None = None,
                 base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Defaults, then the file at ``path``, then ``flags``; validated."""
    config = base or ExperimentConfig()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {p}: {exc}") from None
        config = apply_overrides(config, parse_lines(text.splitlines(), str(p)))
    if flags:
        config = apply_overrides(config, {ALIASES.get(k, k): v for k, v in flags.items()})
    return config.validate()


def config_to_dict(config: ExperimentConfig) -> dict:
    return dataclasses.asdict(config)
