"""Run configuration: nested dataclasses covering every tunable, loadable
from YAML with CLI overrides, hashed for checkpoint compatibility checks."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field

import yaml

from . import strokefont
from .detector import DetectorConfig
from .featnet import BackboneConfig
from .roimask import RoiMaskConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    canvas: tuple[int, int] = (128, 128)
    train_samples: int = 50
    val_samples: int = 20
    word_length: tuple[int, int] = (3, 6)
    font_scale: tuple[float, float] = (14.0, 20.0)
    kinds: tuple[str, ...] = ("line", "arc", "sine")
    max_words: int = 2
    rotation: tuple[float, float] = (-0.35, 0.35)
    partial_fraction: float = 0.0  # fraction of train samples degraded
    drop_fraction: float = 0.5  # annotations dropped per partial sample


@dataclass(frozen=True)
class RecognizerConfig:
    hidden_dim: int = 256
    attn_dim: int = 128
    embed_dim: int = 64
    recurrent_dropout: float = 0.1
    layer_norm: bool = True
    max_steps: int = 40


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 8000
    batch_size: int = 2
    learning_rate: float = 1e-3
    momentum: float = 0.9
    lr_decay_factor: float = 3.0
    lr_decay_interval: int = 2000
    grad_clip: float = 10.0
    # probability that a step draws its (homogeneous) batch from the
    # partial pool; mirrors a 1:1 full/partial data mix by default
    partial_batch_ratio: float = 0.5
    label_smoothing: float = 0.9
    # 'on_value': true symbol gets `label_smoothing`; 'mass': that much
    # probability is spread uniformly instead
    label_smoothing_mode: str = "on_value"
    loss_alpha: float = 1.0
    loss_beta: float = 1.0
    loss_gamma: float = 1.0
    use_roi_masking: bool = True
    use_partial_data: bool = True
    strategy: str = "single_step"  # or "two_step"
    phase1_steps: int = 2000
    checkpoint_interval: int = 1000
    log_partial_detection_losses: bool = True


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    case_sensitive: bool = True


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    device: str = "cpu"
    alphabet: str = strokefont.ALPHANUMERIC_UPPER
    dataset_dir: str = "data"
    checkpoint_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    roimask: RoiMaskConfig = field(default_factory=RoiMaskConfig)
    recognizer: RecognizerConfig = field(default_factory=RecognizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def resolved_device(self) -> str:
        return os.environ.get("TEXTSPOTTER_DEVICE", self.device)


_TUPLE_FIELDS = (tuple, typing.Tuple)


def _coerce(value, ftype):
    origin = typing.get_origin(ftype)
    if dataclasses.is_dataclass(ftype) and isinstance(value, dict):
        return _from_dict(ftype, value)
    if origin in _TUPLE_FIELDS and isinstance(value, (list, tuple)):
        args = typing.get_args(ftype)
        if args and args[-1] is Ellipsis:
            return tuple(_coerce(v, args[0]) for v in value)
        if args:
            return tuple(_coerce(v, t) for v, t in zip(value, args))
        return tuple(value)
    if ftype is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _from_dict(cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"expected mapping for {cls.__name__}, got {type(data)}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(
            f"unknown config key(s) for {cls.__name__}: {sorted(unknown)}")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(value, hints[name])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config for {cls.__name__}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data or {})


def config_to_dict(config) -> dict:
    return dataclasses.asdict(config)


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    """Read YAML config (optional) and apply dotted-key overrides, which
    take precedence: {'train.steps': 100} sets config.train.steps."""
    data: dict = {}
    if path:
        with open(path) as fh:
            loaded = yaml.safe_load(fh)
        if loaded is not None:
            if not isinstance(loaded, dict):
                raise ConfigError(f"config file {path} must hold a mapping")
            data = loaded
    for key, value in (overrides or {}).items():
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} conflicts with scalar")
        node[parts[-1]] = value
    return config_from_dict(data)


def save_config(config: RunConfig, path: str) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(config), fh, sort_keys=True)


def config_hash(config: RunConfig) -> str:
    """Hash of the model-defining configuration.

    Run-length and operational fields (train.steps, checkpoint cadence) are
    excluded so a checkpoint can be resumed for more steps; everything that
    shapes the model, data, or update rule participates.
    """
    data = config_to_dict(config)
    for volatile in ("steps", "checkpoint_interval"):
        data["train"].pop(volatile, None)
    blob = json.dumps(data, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
