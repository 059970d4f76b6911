"""Experiment configuration files (strict JSON)."""

from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from hetseg.labelspace import (
    DEFAULT_CLASS_NAMES,
    DEFAULT_GROUPS,
    AnnotationProtocol,
    LabelSpace,
    build_label_space,
)
from hetseg.phantom import PhantomConfig, StructureSpec, default_structures
from hetseg.trainer import DROPOUT_PROFILES, METHODS, TrainConfig

CONFIG_VERSION = 1
SEED_STRIDE = 100_000  # spacing between the per-database sample seed ranges


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class StructureBlock(_Strict):
    kind: Literal["ellipse", "disc", "bar"]
    center: tuple[float, float]
    size_a: tuple[float, float]
    size_b: tuple[float, float] = (0.0, 0.0)
    intensity: float = Field(ge=-1.0, le=1.0)
    jitter: float = Field(4.0, ge=0)
    softness: float = Field(0.0, ge=0, lt=1)
    max_angle: float = Field(0.0, ge=0, le=90)


class PhantomBlock(_Strict):
    image_size: int = Field(64, ge=8, le=512)
    noise_sigma: float = Field(0.05, ge=0)
    seed: int = Field(1000, ge=0)
    structures: Optional[list[StructureBlock]] = None

    def build(self, intensity_shift: float = 0.0) -> PhantomConfig:
        if self.structures is None:
            structures = default_structures()
        else:
            structures = tuple(StructureSpec(**s.model_dump()) for s in self.structures)
        return PhantomConfig(self.image_size, structures, self.noise_sigma, intensity_shift)


class LabelSpaceBlock(_Strict):
    names: list[str] = Field(default_factory=lambda: list(DEFAULT_CLASS_NAMES), min_length=1)
    groups: list[Literal["overlapping", "non_overlapping"]] = Field(
        default_factory=lambda: list(DEFAULT_GROUPS))

    @model_validator(mode="after")
    def _same_length(self):
        if len(self.names) != len(self.groups):
            raise ValueError("names and groups must have the same length")
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")
        return self


class DatabasesBlock(_Strict):
    db1_train: int = Field(20, ge=1, lt=SEED_STRIDE)
    db1_test: int = Field(20, ge=1, lt=SEED_STRIDE)
    db2_train: int = Field(30, ge=1, lt=SEED_STRIDE)
    db2_protocol: list[int] = Field(default_factory=lambda: [1, 2, 3])
    db1_intensity_shift: float = 0.0
    db2_intensity_shift: float = 0.0

    @field_validator("db2_protocol")
    @classmethod
    def _positive(cls, v: list[int]) -> list[int]:
        if any(c < 1 for c in v):
            raise ValueError("protocol classes are 1-based; background (0) cannot be annotated")
        if len(set(v)) != len(v):
            raise ValueError("duplicate class in protocol")
        return v


class TrainBlock(_Strict):
    epochs: int = Field(40, ge=1)
    batch_size: int = Field(8, ge=1)
    lr: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    ema_alpha: float = Field(0.99, ge=0, lt=1)
    dropout: Optional[Literal["none", "last2", "all_but_first2"]] = None
    max_w: float = Field(1.0, ge=0)
    ramp_start: int = Field(3, ge=0)
    ramp_len: int = Field(10, ge=1)


class TrainOverride(_Strict):
    epochs: Optional[int] = Field(None, ge=1)
    batch_size: Optional[int] = Field(None, ge=1)
    lr: Optional[float] = Field(None, gt=0)
    momentum: Optional[float] = Field(None, ge=0, lt=1)
    ema_alpha: Optional[float] = Field(None, ge=0, lt=1)
    dropout: Optional[Literal["none", "last2", "all_but_first2"]] = None
    max_w: Optional[float] = Field(None, ge=0)
    ramp_start: Optional[int] = Field(None, ge=0)
    ramp_len: Optional[int] = Field(None, ge=1)


class ExperimentConfig(_Strict):
    version: Literal[1]
    phantom: PhantomBlock = Field(default_factory=PhantomBlock)
    label_space: LabelSpaceBlock = Field(default_factory=LabelSpaceBlock)
    databases: DatabasesBlock = Field(default_factory=DatabasesBlock)
    train: TrainBlock = Field(default_factory=TrainBlock)
    methods: dict[str, TrainOverride] = Field(default_factory=dict)
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2], min_length=1)
    output_dir: str = "runs"

    @field_validator("methods")
    @classmethod
    def _known_methods(cls, v: dict) -> dict:
        unknown = sorted(set(v) - set(METHODS))
        if unknown:
            raise ValueError(f"unknown methods {unknown}; expected a subset of {list(METHODS)}")
        return v

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v: list[int]) -> list[int]:
        if any(s < 0 for s in v):
            raise ValueError("seeds must be non-negative")
        if len(set(v)) != len(v):
            raise ValueError("duplicate seed")
        return v

    @model_validator(mode="after")
    def _consistent(self):
        c = len(self.label_space.names)
        n_struct = len(self.phantom.structures) if self.phantom.structures is not None else 6
        if n_struct != c:
            raise ValueError(f"phantom defines {n_struct} structures but the label space has {c}")
        if any(k > c for k in self.databases.db2_protocol):
            raise ValueError(f"db2_protocol references a class above C={c}")
        return self

    # -- derived objects -------------------------------------------------------

    def space(self) -> LabelSpace:
        return build_label_space(self.label_space.names, self.label_space.groups)

    def db1_protocol(self) -> AnnotationProtocol:
        return self.space().full_protocol(1)

    def db2_protocol(self) -> AnnotationProtocol:
        return AnnotationProtocol(2, frozenset(self.databases.db2_protocol))

    def train_config(self, method: str, seed: int, **changes) -> TrainConfig:
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}; expected one of {list(METHODS)}")
        values = self.train.model_dump()
        override = self.methods.get(method)
        if override is not None:
            values.update({k: v for k, v in override.model_dump().items() if v is not None})
        values.update(changes)
        return TrainConfig(method=method, seed=seed, **values)

    def fingerprint(self) -> str:
        """Hash of everything that determines the generated data."""
        blob = json.dumps({"phantom": self.phantom.model_dump(),
                           "label_space": self.label_space.model_dump(),
                           "databases": self.databases.model_dump()}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _line_of(text: str, loc: tuple) -> int | None:
    """Best-effort line number of the innermost key of a validation error."""
    keys = [k for k in loc if isinstance(k, str)]
    pos = 0
    line = None
    for key in keys:
        m = re.compile(r'"' + re.escape(key) + r'"\s*:').search(text, pos)
        if m is None:
            break
        pos = m.end()
        line = text.count("\n", 0, m.start()) + 1
    return line


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}:1: top level must be a JSON object")
    if "version" not in raw:
        raise ConfigError(f"{source}:1: missing required key 'version'")
    if raw["version"] != CONFIG_VERSION:
        raise ConfigError(f"{source}:{_line_of(text, ('version',)) or 1}: "
                          f"unsupported config version {raw['version']!r}")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = tuple(err["loc"])
            key = ".".join(str(k) for k in loc) or "<root>"
            line = _line_of(text, loc)
            where = f"{source}:{line}" if line else source
            msg = "unknown key" if err["type"] == "extra_forbidden" else err["msg"]
            lines.append(f"{where}: {key}: {msg}")
        raise ConfigError("\n".join(lines)) from exc


def load_config(path) -> ExperimentConfig:
    if path is None:
        return default_config()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def default_config() -> ExperimentConfig:
    return ExperimentConfig(version=1)


def default_config_json() -> str:
    return json.dumps(default_config().model_dump(mode="json"), indent=2) + "\n"


__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "DROPOUT_PROFILES",
    "default_config",
    "default_config_json",
    "load_config",
    "parse_config",
]
