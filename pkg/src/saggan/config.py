"""Run configuration: one JSON document with sections data, gan, classifier, experiment."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Tuple

from .evaluation import ClassifierConfig, ExperimentConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_samples: int = 400
    image_size: int = 64
    tumor_fraction: float = 0.5
    seed: int = 17
    radius_min: float = 0.08
    radius_max: float = 0.25
    intensity_min: float = 0.4
    intensity_max: float = 0.9
    split_ratios: Tuple[float, float, float] = (0.70, 0.20, 0.10)

    def __post_init__(self):
        self.split_ratios = tuple(self.split_ratios)
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        if not 0 <= self.tumor_fraction <= 1:
            raise ValueError("tumor_fraction must lie in [0, 1]")
        if not 0 < self.radius_min <= self.radius_max < 0.5:
            raise ValueError("radius_min/radius_max need 0 < min <= max < 0.5")
        if not 0 < self.intensity_min <= self.intensity_max:
            raise ValueError("intensity_min/intensity_max need 0 < min <= max")
        if len(self.split_ratios) != 3 or abs(sum(self.split_ratios) - 1) > 1e-9:
            raise ValueError("split_ratios must be three numbers summing to 1")


SECTIONS = {
    "data": DataConfig,
    "gan": TrainConfig,
    "classifier": ClassifierConfig,
    "experiment": ExperimentConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    gan: TrainConfig = field(default_factory=TrainConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def to_dict(self) -> dict:
        return json.loads(json.dumps({name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}))

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig(
            data=dataclasses.replace(self.data, seed=seed),
            gan=dataclasses.replace(self.gan, seed=seed),
            classifier=dataclasses.replace(self.classifier, seed=seed),
            experiment=dataclasses.replace(self.experiment, seed=seed),
        )


def config_hash(doc: dict) -> str:
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _check_type(path: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and (
            not default or len(value) == len(default) or isinstance(default[0], str)
        )
        if ok:
            value = tuple(_check_type(f"{path}[{i}]", v, default[0]) for i, v in enumerate(value))
    else:  # pragma: no cover - every field has a typed default
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {json.dumps(value)}")
    return value


def _build_section(name: str, doc: Any):
    cls = SECTIONS[name]
    if not isinstance(doc, dict):
        raise ConfigError(f"{name}: expected an object")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in doc.items():
        if key not in names:
            raise ConfigError(f"{name}.{key}: unknown key")
        kwargs[key] = _check_type(f"{name}.{key}", value, getattr(defaults, key))
    try:
        return cls(**kwargs)
    except ValueError as err:
        msg = str(err)
        field_name = msg.split()[0].rstrip(":")
        if field_name.split("/")[0] in names:
            raise ConfigError(f"{name}.{field_name}: {msg}") from err
        raise ConfigError(f"{name}: {msg}") from err


def parse_config_dict(doc: Any) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    for key in doc:
        if key not in SECTIONS:
            raise ConfigError(f"{key}: unknown key")
    cfg = RunConfig(**{name: _build_section(name, doc.get(name, {})) for name in SECTIONS})
    if cfg.gan.image_size != cfg.data.image_size:
        raise ConfigError(
            f"gan.image_size: {cfg.gan.image_size} must equal data.image_size {cfg.data.image_size}"
        )
    return cfg


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON: {err}") from err
    return parse_config_dict(doc)
