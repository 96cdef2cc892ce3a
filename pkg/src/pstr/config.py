"""Run configuration: one TOML file with a section per subsystem.

Every tunable lives in exactly one section::

    [data]       synthetic dataset manifest (seed, sizes, identity counts)
    [detector]   d_model, heads, points, encoder/decoder depth, queries
    [reid]       variant, scales, input_source, attention, depth
    [loss]       focal/OIM settings; [loss.weights] holds the four lambdas
    [train]      optimizer, schedule, batch size, precision, seed
    [eval]       score/IoU thresholds, gallery sizes
    [gradcheck]  instances per operation, seed
    [paths]      data directory, output directory, checkpoint

Keys not listed in a section's dataclass are rejected.  Defaults are the
dataclass defaults of the owning module.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import tomli
import tomli_w

from .data import DataConfigError, DatasetManifest
from .detector import ConfigError, DetectorConfig
from .loss import LossConfig, LossWeights
from .model import ModelConfig
from .reid import ReidConfig
from .train import TrainConfig


@dataclass(frozen=True)
class EvalConfig:
    score_thresh: float = 0.3
    iou_thresh: float = 0.5
    gallery_sizes: tuple[int, ...] = (10, 25, 50)
    batch_size: int = 8


@dataclass(frozen=True)
class GradcheckConfig:
    instances: int = 20
    seed: int = 0


@dataclass(frozen=True)
class PathsConfig:
    data: str = "data"
    out: str = "runs/default"
    checkpoint: str = ""


@dataclass(frozen=True)
class RunConfig:
    data: DatasetManifest = field(default_factory=DatasetManifest)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    reid: ReidConfig = field(default_factory=ReidConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(self.detector, self.reid)

    def validate(self) -> RunConfig:
        self.data.validate()
        w = self.loss.weights
        if min(w.cls, w.iou, w.l1, w.oim) < 0:
            raise ConfigError(f"loss weights must be non-negative, got {w}")
        if self.train.steps < 1 or self.train.batch_size < 1:
            raise ConfigError("train.steps and train.batch_size must be positive")
        if self.train.precision not in ("float32", "float64"):
            raise ConfigError(f"train.precision must be float32 or float64, got {self.train.precision!r}")
        if not 0 < self.loss.tau or self.loss.queue_size < 1:
            raise ConfigError("loss.tau and loss.queue_size must be positive")
        if any(s < 1 for s in self.eval.gallery_sizes):
            raise ConfigError(f"gallery sizes must be positive, got {self.eval.gallery_sizes}")
        return self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (tuple, list)):
        return [_plain(x) for x in v]
    return v


def _coerce(value, hint, where: str):
    origin = typing.get_origin(hint)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{where} must be a table")
        return _build(hint, value, where)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list")
        args = typing.get_args(hint)
        item = args[0]
        return tuple(_coerce(x, item, f"{where}[{i}]") for i, x in enumerate(value))
    if hint is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if hint in (int, float, str, bool) and (type(value) is not hint):
        raise ConfigError(f"{where} must be {hint.__name__}, got {value!r}")
    return value


def _build(cls, table: dict, where: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls) if f.init}
    unknown = sorted(set(table) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{where}.{k}") for k, v in table.items()}
    try:
        return cls(**kwargs)
    except (ConfigError, DataConfigError):
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def from_mapping(doc: dict) -> RunConfig:
    hints = typing.get_type_hints(RunConfig)
    unknown = sorted(set(doc) - set(hints))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    parts = {}
    for name, table in doc.items():
        if not isinstance(table, dict):
            raise ConfigError(f"top-level key {name!r} must be a [section]")
        parts[name] = _build(hints[name], table, name)
    return RunConfig(**parts).validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        doc = tomli.loads(Path(path).read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_mapping(doc)


def override(cfg: RunConfig, **changes) -> RunConfig:
    """Apply dotted-path overrides, e.g. ``{"reid.variant": "single"}``."""
    sections = {}
    for key, value in changes.items():
        section, attr = key.split(".")
        sections.setdefault(section, {})[attr] = value
    updated = {}
    for section, kv in sections.items():
        try:
            updated[section] = replace(getattr(cfg, section), **kv)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, (ConfigError, DataConfigError)):
                raise
            raise ConfigError(f"[{section}]: {exc}") from exc
    return replace(cfg, **updated).validate()


__all__ = [
    "ConfigError",
    "EvalConfig",
    "GradcheckConfig",
    "LossWeights",
    "PathsConfig",
    "RunConfig",
    "from_mapping",
    "load_config",
    "override",
]
