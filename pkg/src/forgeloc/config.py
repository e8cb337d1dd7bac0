"""Configuration dataclasses, JSON round-tripping, and dotted overrides.

Defaults are desk-scale; ``paper_model_config``/``paper_train_config`` build
the full-size variants (512px, 256-d encoders with 6 layers, ResNet-style
channel widths).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError

FUSION_MODES = ("mul", "add")
LOSS_MODES = ("upsample", "downsample")
NORM_KINDS = ("group", "batch")
STANDARD_LAMBDAS = (0.1, 0.2, 0.3, 0.4)


@dataclass
class BackboneConfig:
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    blocks_per_stage: tuple[int, int, int, int] = (1, 1, 1, 1)
    stem_channels: int = 8
    norm: str = "group"
    bottleneck: bool = False

    def validate(self):
        if len(self.stage_channels) != 4 or any(c <= 0 for c in self.stage_channels):
            raise ConfigError(f"stage_channels must be 4 positive ints, got {self.stage_channels}")
        if len(self.blocks_per_stage) != 4 or any(n < 1 for n in self.blocks_per_stage):
            raise ConfigError(f"blocks_per_stage must be 4 ints >= 1, got {self.blocks_per_stage}")
        if self.stem_channels <= 0:
            raise ConfigError(f"stem_channels must be positive, got {self.stem_channels}")
        if self.norm not in NORM_KINDS:
            raise ConfigError(f"norm must be one of {NORM_KINDS}, got {self.norm!r}")
        return self


@dataclass
class EncoderConfig:
    d_model: int = 32
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 64
    dropout_p: float = 0.1

    def validate(self):
        if self.d_model % self.num_heads:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by num_heads {self.num_heads}"
            )
        if self.d_model % 4:
            raise ConfigError(f"d_model must be divisible by 4 for the 2-D positional "
                              f"encoding, got {self.d_model}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0,1), got {self.dropout_p}")
        if self.num_layers < 1 or self.ffn_dim < 1:
            raise ConfigError("num_layers and ffn_dim must be >= 1")
        return self


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: str = "mul"
    output_branch: int = 2

    def validate(self):
        self.backbone.validate()
        self.encoder.validate()
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.output_branch not in (2, 3, 4, 5):
            raise ConfigError(f"output_branch must be in 2..5, got {self.output_branch}")
        return self


@dataclass
class LossConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    lambdas: tuple[float, float, float, float] = (0.1, 0.2, 0.3, 0.4)
    mode: str = "upsample"

    def validate(self):
        if self.mode not in LOSS_MODES:
            raise ConfigError(f"loss mode must be one of {LOSS_MODES}, got {self.mode!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0,1], got {self.alpha}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        check_lambda_ordering(self.lambdas, self.mode)
        if sorted(self.lambdas) != sorted(STANDARD_LAMBDAS):
            raise ConfigError(
                f"lambdas must be a permutation of {STANDARD_LAMBDAS}, got {self.lambdas}"
            )
        return self


def check_lambda_ordering(lambdas, mode: str) -> None:
    """Branch weights are ordered by the loss mode: strictly increasing from
    branch 2 to branch 5 when predictions are upsampled, strictly decreasing
    when ground truth is downsampled."""
    pairs = list(zip(lambdas, lambdas[1:]))
    if mode == "upsample" and any(a >= b for a, b in pairs):
        raise ConfigError(
            f"upsample mode needs lambda2 < lambda3 < lambda4 < lambda5, got {tuple(lambdas)}"
        )
    if mode == "downsample" and any(a <= b for a, b in pairs):
        raise ConfigError(
            f"downsample mode needs lambda2 > lambda3 > lambda4 > lambda5, got {tuple(lambdas)}"
        )


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 2
    epochs: int = 20
    input_size: int = 64
    seed: int = 0
    checkpoint_every: int = 5
    freeze_backbone: bool = False
    grad_clip: float | None = None
    lr_step_decay: float | None = None  # multiply lr by this every 10 epochs
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.input_size % 32:
            raise ConfigError(f"input_size must be divisible by 32, got {self.input_size}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        self.loss.validate()
        self.model.validate()
        return self


def paper_model_config() -> ModelConfig:
    return ModelConfig(
        backbone=BackboneConfig(
            stage_channels=(256, 512, 1024, 2048),
            blocks_per_stage=(3, 4, 6, 3),
            stem_channels=64,
            bottleneck=True,
        ),
        encoder=EncoderConfig(d_model=256, num_layers=6, num_heads=8, ffn_dim=2048),
    )


def paper_train_config() -> TrainConfig:
    return TrainConfig(epochs=50, input_size=512, model=paper_model_config())


# serialization -------------------------------------------------------------


def _to_jsonable(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {k: _to_jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def config_to_dict(cfg) -> dict:
    return _to_jsonable(cfg)


def _build(cls, data: dict):
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r} for {cls.__name__}")
        ftype = fields[key].type
        if key in ("backbone", "encoder", "model", "loss"):
            nested = {"backbone": BackboneConfig, "encoder": EncoderConfig,
                      "model": ModelConfig, "loss": LossConfig}[key]
            kwargs[key] = _build(nested, value)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
        del ftype
    return cls(**kwargs)


def train_config_from_dict(data: dict) -> TrainConfig:
    return _build(TrainConfig, data).validate()


def load_train_config(path: str, overrides: list[str] | None = None) -> TrainConfig:
    with open(path) as f:
        data = json.load(f)
    return apply_overrides(data, overrides or [])


def apply_overrides(data: dict, overrides: list[str]) -> TrainConfig:
    """Apply ``dotted.key=value`` overrides on top of a config dict."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {dotted!r} crosses a non-object value")
        node[keys[-1]] = value
    return train_config_from_dict(data)


def config_digest(cfg: ModelConfig) -> bytes:
    """Stable digest of the model architecture, stored in checkpoints."""
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).digest()
