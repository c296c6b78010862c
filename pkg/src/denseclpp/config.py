"""Versioned JSON experiment configuration with strict key checking."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .data import AugmentParams, SyntheticSpec
from .decoder import DecoderConfig
from .encoder import ConfigError, EncoderConfig
from .losses import LossParams
from .pairing import PairingParams

CONFIG_VERSION = 1
METHODS = ("simclr", "densecl", "denseclpp", "denseclpp_guided")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    base_lr: float = 3e-3
    weight_decay: float = 5e-2
    schedule: str = "cosine"
    method: str = "denseclpp"
    aggregation: str = "GAP"
    loss: LossParams = field(default_factory=LossParams)
    pairing: PairingParams = field(default_factory=PairingParams)
    decoder: DecoderConfig | None = None
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 writes only the final checkpoint
    prefetch: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.aggregation.upper() not in ("GAP", "CLS"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        self.aggregation = self.aggregation.upper()


@dataclass
class EvalConfig:
    aggregation: str = "GAP"
    feature_source: str = "backbone"  # or "global_head"
    probe_epochs: int = 500
    probe_lr: float = 0.5
    probe_weight_decay: float = 1e-4
    threshold: float = 0.5
    train_fraction: float = 0.8
    histogram_bins: int = 40
    histogram_images: int = 64
    seed: int = 0

    def __post_init__(self):
        self.aggregation = self.aggregation.upper()
        if self.aggregation not in ("GAP", "CLS"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if self.feature_source not in ("backbone", "global_head"):
            raise ConfigError(f"unknown feature_source {self.feature_source!r}")


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    augment: AugmentParams = field(default_factory=AugmentParams)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: str | None = None

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"config version {self.version} unsupported (expected {CONFIG_VERSION})")
        if self.data.image_size != self.encoder.image_size:
            raise ConfigError(
                f"data.image_size {self.data.image_size} != encoder.image_size {self.encoder.image_size}"
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _strip_optional(tp):
    if typing.get_origin(tp) in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return tp


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key {path + '.' if path else ''}{unknown[0]}")
    kwargs = {}
    for key, value in data.items():
        tp = _strip_optional(hints[key])
        where = f"{path}.{key}" if path else key
        if dataclasses.is_dataclass(tp):
            kwargs[key] = None if value is None else _build(tp, value, where)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError as err:
        raise ConfigError(f"{path or 'config'}: {err}") from None
    except TypeError as err:
        raise ConfigError(f"{path or 'config'}: {err}") from None


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{source}: malformed JSON at line {err.lineno}, column {err.colno}: {err.msg}") from None
    return from_dict(data)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))


def default_config_text() -> str:
    return resources.files("denseclpp").joinpath("configs/default.json").read_text()


def default_config() -> ExperimentConfig:
    return parse_config(default_config_text(), "default.json")


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``dotted.key=json_value`` overrides and re-validate."""
    data = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                if part in node and node[part] is None:
                    node[part] = {}
                else:
                    raise ConfigError(f"unknown config key {key}")
            node = node[part]
        node[parts[-1]] = value
    return from_dict(data)
