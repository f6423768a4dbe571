"""Run configuration: model, training, synthetic data and evaluation settings.

Configs serialize to JSON with camelCase keys (``learningRate``) so that a
resolved config can be printed, stored and passed back in unchanged.
"""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any, Optional

VARIANTS = ("LSTM_PM", "RPM", "CPM_BASELINE")


class ConfigError(ValueError):
    pass


def _alias(key: str):
    return {"key": key}


@dataclass
class ModelConfig:
    input_size: int = 64
    input_channels: int = 3
    num_joints: int = field(default=7, metadata=_alias("P"))
    downsample_factor: int = 4
    feature_channels: int = 32
    memory_channels: int = 48
    generator_channels: int = 32
    seq_len: int = field(default=5, metadata=_alias("T"))
    variant: str = "LSTM_PM"
    center_sigma: Optional[float] = None  # None -> heatmap_size / 4
    label_sigma: float = 1.5
    dropout: float = 0.5

    @property
    def heatmap_size(self) -> int:
        return self.input_size // self.downsample_factor

    @property
    def num_pools(self) -> int:
        return self.downsample_factor.bit_length() - 1

    @property
    def belief_channels(self) -> int:
        return self.num_joints + 1

    @property
    def lstm_in_channels(self) -> int:
        return self.feature_channels + self.belief_channels + 1

    @property
    def resolved_center_sigma(self) -> float:
        return self.center_sigma if self.center_sigma is not None else self.heatmap_size / 4

    def validate(self) -> None:
        f = self.downsample_factor
        if f < 1 or f & (f - 1):
            raise ConfigError(f"downsampleFactor must be a power of two, got {f}")
        if self.input_size % f:
            raise ConfigError(f"inputSize {self.input_size} not divisible by downsampleFactor {f}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("input_size", "input_channels", "num_joints", "feature_channels",
                     "memory_channels", "generator_channels", "seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.feature_channels < 2:
            raise ConfigError("featureChannels must be at least 2")
        if self.label_sigma <= 0 or (self.center_sigma is not None and self.center_sigma <= 0):
            raise ConfigError("sigmas must be positive")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip: float = 100.0
    batch_size: int = 4
    lr_drop_factor: float = 0.333
    lr_drop_every: int = 2000
    total_iterations: int = 2000
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 500
    deterministic: bool = True
    augment: bool = True
    scale_range: tuple = (0.8, 1.4)
    rotate_deg: tuple = (-40.0, 40.0)
    flip_prob: float = 0.5

    def validate(self) -> None:
        for name in ("learning_rate", "momentum", "weight_decay", "grad_clip"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 0 < self.lr_drop_factor < 1:
            raise ConfigError("lrDropFactor must lie in (0, 1)")
        for name in ("batch_size", "lr_drop_every", "log_every", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.total_iterations < 0:
            raise ConfigError("totalIterations must be nonnegative")
        if self.scale_range[0] <= 0:
            raise ConfigError("scale range must be positive")


@dataclass
class SynthConfig:
    image_size: int = 64
    figure_height: float = 30.0
    velocity_range: float = 1.5  # max |velocity| in pixels/frame
    occlusion_prob: float = 0.3
    occlusion_duration: tuple = (2, 3)
    motion_blur: bool = False
    background: str = "flat"  # "flat" or "noise"
    center_jitter: float = 4.0
    joint_radius: float = 2.5
    limb_width: float = 1.5

    def validate(self) -> None:
        if self.background not in ("flat", "noise"):
            raise ConfigError(f"background must be 'flat' or 'noise', got {self.background!r}")
        if not 0 <= self.occlusion_prob <= 1:
            raise ConfigError("occlusionProb must lie in [0, 1]")
        lo, hi = self.occlusion_duration
        if lo < 1 or hi < lo:
            raise ConfigError("occlusionDuration must be [lo, hi] with 1 <= lo <= hi")
        if self.velocity_range < 0:
            raise ConfigError("velocityRange must be nonnegative")


@dataclass
class EvalConfig:
    alpha: float = 0.2
    scales: tuple = (1.0,)
    num_sequences: int = 50
    seed: int = 10_000


@dataclass
class RunConfig:
    profile: str = "tiny"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.synth.validate()
        if self.synth.image_size != self.model.input_size:
            raise ConfigError(f"synth.imageSize {self.synth.image_size} != model.inputSize {self.model.input_size}")


PROFILES = {
    "tiny": {},
    "paper": {
        "model": {"inputSize": 368, "P": 13, "downsampleFactor": 8, "memoryChannels": 48,
                  "featureChannels": 32, "generatorChannels": 128, "labelSigma": 1.0},
        "train": {"learningRate": 8e-5, "lrDropEvery": 40000, "totalIterations": 200000},
        "synth": {"imageSize": 368, "figureHeight": 200.0, "velocityRange": 6.0,
                  "jointRadius": 8.0, "limbWidth": 5.0, "centerJitter": 20.0},
    },
}

# ---------------------------------------------------------------- (de)serialization


def _camel(name: str) -> str:
    head, *rest = name.split("_")
    return head + "".join(w[:1].upper() + w[1:] for w in rest)


def _key(f: dataclasses.Field) -> str:
    return f.metadata.get("key") or _camel(f.name)


def to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            v = to_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[_key(f)] = v
    return out


def _coerce(f: dataclasses.Field, current: Any, value: Any, where: str) -> Any:
    if isinstance(current, bool) or f.type in ("bool",):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes"):
                return True
            if value.lower() in ("0", "false", "no"):
                return False
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(current, tuple):
        if isinstance(value, str):
            value = json.loads(value)
        return tuple(value)
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float) or (current is None and "float" in str(f.type)):
        if value is None or (isinstance(value, str) and value.lower() in ("null", "none")):
            return None
        return float(value)
    return value


def update(cfg, data: dict, where: str = "") -> None:
    """Apply a camelCase (or snake_case) mapping onto ``cfg`` in place."""
    fields = {}
    for f in dataclasses.fields(cfg):
        fields[_key(f)] = f
        fields[f.name] = f
    for key, value in data.items():
        path = f"{where}.{key}" if where else key
        f = fields.get(key)
        if f is None:
            raise ConfigError(f"unknown config key {path!r}")
        current = getattr(cfg, f.name)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected an object")
            update(current, value, path)
        else:
            try:
                setattr(cfg, f.name, _coerce(f, current, value, path))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{path}: {exc}") from None


def set_dotted(cfg, path: str, value: Any) -> None:
    """Set one scalar field by dotted path, e.g. ``train.learningRate``."""
    *parents, leaf = path.split(".")
    nested: dict = {leaf: value}
    for p in reversed(parents):
        nested = {p: nested}
    update(cfg, nested)


def model_config_from_dict(data: dict) -> ModelConfig:
    cfg = ModelConfig()
    update(cfg, data, "model")
    return cfg


def resolve(profile: str = "tiny", data: Optional[dict] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Profile defaults, then config-file values, then dotted overrides."""
    data = copy.deepcopy(data or {})
    profile = data.pop("profile", profile)
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = RunConfig(profile=profile)
    update(cfg, PROFILES[profile])
    update(cfg, data)
    for path, value in (overrides or {}).items():
        set_dotted(cfg, path, value)
    cfg.validate()
    return cfg
