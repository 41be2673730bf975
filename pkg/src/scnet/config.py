"""Configuration dataclasses and run-config file handling.

A run config is a JSON file with up to five sections (model, loss, train,
data, prior). Unknown sections or keys are rejected rather than ignored so
that typos fail loudly. Individual values can be overridden from the command
line with dotted keys, e.g. ``train.epochs=3``.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Any


class ConfigError(ValueError):
    """Invalid configuration value, file, or override."""


class DataError(ValueError):
    """Missing or malformed dataset content."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


LOSS_COMBOS = ("focal+softiou", "focal_only", "ce_only", "ce+softiou", "focal+lovasz")
PRIOR_MODES = ("classical-fallback", "precomputed", "learned-edge-detector")
INIT_SCHEMES = ("xavier", "pretrained-encoder")


def default_scale_weights(num_scales: int) -> list[float]:
    """Deep-supervision weights, symmetric around the middle scale."""
    base = [0.5, 0.75, 1.0, 0.75, 0.5]
    if num_scales == 5:
        return list(base)
    if num_scales == 4:
        return base[:4]
    raise ConfigError(f"no default scale weights for num_scales={num_scales}")


@dataclass
class ModelConfig:
    num_scales: int = 5
    encoder_channels: list[int] = field(default_factory=lambda: [64, 128, 256, 512, 512])
    convs_per_block: list[int] = field(default_factory=lambda: [2, 2, 3, 3, 3])
    input_channels: int = 4
    attention_in_encoder: bool = True
    attention_in_decoder: bool = True
    attention_out_channels: int = 1
    use_instance_norm: bool = True
    use_scalar_weight_variant: bool = False

    def validate(self) -> None:
        if self.num_scales not in (4, 5):
            raise ConfigError(f"num_scales must be 4 or 5, got {self.num_scales}")
        if len(self.encoder_channels) != self.num_scales:
            raise ConfigError("encoder_channels length must equal num_scales")
        if len(self.convs_per_block) != self.num_scales:
            raise ConfigError("convs_per_block length must equal num_scales")
        if any(c <= 0 for c in self.encoder_channels):
            raise ConfigError("encoder_channels must be positive")
        if any(n <= 0 for n in self.convs_per_block):
            raise ConfigError("convs_per_block entries must be positive")
        if self.num_scales == 5 and sum(self.convs_per_block) != 13:
            raise ConfigError("a 5-scale trunk must have 13 convolutions in total")
        if self.input_channels not in (3, 4):
            raise ConfigError("input_channels must be 3 (RGB) or 4 (RGB + edge)")
        if self.attention_out_channels < 1:
            raise ConfigError("attention_out_channels must be >= 1")
        if self.use_scalar_weight_variant and (self.attention_in_encoder or self.attention_in_decoder):
            raise ConfigError("scalar weight variant replaces attention; disable attention flags")


@dataclass
class LossConfig:
    combo: str = "focal+softiou"
    alpha: float = 1.0
    gamma: float = 2.0
    scale_weights: list[float] = field(default_factory=lambda: default_scale_weights(5))
    iou_weight: float = 1.0
    eps: float = 1e-7
    reduction: str = "sum"
    class_weights: tuple[float, float] = (1.0, 1.0)

    def validate(self) -> None:
        if self.combo not in LOSS_COMBOS:
            raise ConfigError(f"unknown loss combo {self.combo!r}, expected one of {LOSS_COMBOS}")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")
        if any(w < 0 for w in self.scale_weights):
            raise ConfigError("scale_weights must be non-negative")
        if self.iou_weight < 0:
            raise ConfigError("iou_weight must be non-negative")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError("reduction must be 'sum' or 'mean'")
        if len(self.class_weights) != 2 or any(w <= 0 for w in self.class_weights):
            raise ConfigError("class_weights must be two positive numbers")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 2e-4
    batch_size: int = 4
    epochs: int = 10
    max_iterations: int | None = None
    seed: int = 0
    checkpoint_every: int = 1
    early_stop_patience: int = 10
    init_scheme: str = "xavier"
    encoder_checkpoint: str | None = None
    device: str = "cpu"
    deterministic: bool = True

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1 when set")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if self.init_scheme not in INIT_SCHEMES:
            raise ConfigError(f"init_scheme must be one of {INIT_SCHEMES}")
        if self.init_scheme == "pretrained-encoder" and not self.encoder_checkpoint:
            raise ConfigError("pretrained-encoder init needs encoder_checkpoint")


@dataclass
class AugmentConfig:
    rotation_range: float = 90.0
    horizontal_flip: bool = True
    vertical_flip: bool = True
    crop_size: int = 256
    crops_per_image: int = 4
    seed: int = 0
    enabled: bool = True

    def validate(self) -> None:
        if not 0.0 <= self.rotation_range <= 90.0:
            raise ConfigError("rotation_range must be in [0, 90] degrees")
        if self.crop_size < 1:
            raise ConfigError("crop_size must be >= 1")
        if self.crops_per_image < 1:
            raise ConfigError("crops_per_image must be >= 1")


@dataclass
class DataConfig:
    root: str = "data"
    images_dir: str = "images"
    masks_dir: str = "masks"
    edges_dir: str | None = None
    tag: str = "dataset"
    split_fraction: float = 0.2
    split_seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self) -> None:
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError("split_fraction must lie strictly between 0 and 1")
        self.augment.validate()


@dataclass
class PriorConfig:
    mode: str = "classical-fallback"
    threshold: float = 0.5
    checkpoint: str | None = None

    def validate(self) -> None:
        if self.mode not in PRIOR_MODES:
            raise ConfigError(f"prior mode must be one of {PRIOR_MODES}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("prior threshold must lie strictly between 0 and 1")
        if self.mode == "learned-edge-detector" and not self.checkpoint:
            raise ConfigError("learned-edge-detector mode needs a checkpoint path")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)

    def validate(self) -> None:
        self.model.validate()
        self.loss.validate()
        self.train.validate()
        self.data.validate()
        self.prior.validate()
        if len(self.loss.scale_weights) != self.model.num_scales:
            raise ConfigError("loss.scale_weights length must equal model.num_scales")


_SECTIONS = {
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "prior": PriorConfig,
}


def _build_dataclass(cls, values: dict, path: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{path} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in values.items():
        if cls is LossConfig and key == "focal_soft_iou_relative_weight":
            key = "iou_weight"  # long-form alias for the relative weight
        if key not in fields:
            raise ConfigError(f"unknown key {path}.{key}")
        if key == "augment":
            val = _build_dataclass(AugmentConfig, val, f"{path}.augment")
        elif key == "scale_weights":
            val = [float(v) for v in val]
        elif key == "class_weights":
            val = tuple(float(v) for v in val)
        kwargs[key] = val
    return cls(**kwargs)


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a JSON object")
    sections = {}
    for key, val in raw.items():
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config section {key!r}")
        sections[key] = _build_dataclass(_SECTIONS[key], val, key)
    cfg = RunConfig(**sections)
    # num_scales may differ from the default; resupply weights unless given explicitly
    if "loss" not in raw or "scale_weights" not in raw.get("loss", {}):
        cfg.loss.scale_weights = default_scale_weights(cfg.model.num_scales)
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def _coerce(text: str, current: Any):
    if text.lower() in ("null", "none"):
        return None
    if isinstance(current, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse boolean from {text!r}")
    try:
        if isinstance(current, int) and not isinstance(current, bool):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, (list, tuple)):
            parts = [p for p in text.split(",") if p]
            return type(current)(float(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {text!r}: {exc}") from exc
    if isinstance(current, str):
        return text
    # no current value to infer a type from: JSON covers numbers and booleans,
    # anything unparseable stays a string (paths, names)
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: RunConfig, spec: str) -> None:
    """Apply one ``section.key=value`` override in place."""
    if "=" not in spec:
        raise ConfigError(f"override {spec!r} must look like section.key=value")
    dotted, text = spec.split("=", 1)
    parts = dotted.split(".")
    if len(parts) < 2:
        raise ConfigError(f"override key {dotted!r} must be dotted, e.g. train.epochs")
    obj = cfg
    for part in parts[:-1]:
        if not hasattr(obj, part):
            raise ConfigError(f"unknown config path {dotted!r}")
        obj = getattr(obj, part)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(obj) or leaf not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config path {dotted!r}")
    setattr(obj, leaf, _coerce(text, getattr(obj, leaf)))


def load_run_config(path: str, overrides: list[str] | None = None) -> RunConfig:
    """Load, override, and validate a run config.

    The SCNET_SEED environment variable, when set, replaces train.seed after
    file values but before --set overrides, so explicit overrides still win.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    cfg = config_from_dict(raw)
    env_seed = os.environ.get("SCNET_SEED")
    if env_seed is not None:
        try:
            cfg.train.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"SCNET_SEED must be an integer, got {env_seed!r}") from exc
    for spec in overrides or []:
        apply_override(cfg, spec)
    cfg.validate()
    return cfg
