"""LSTM Pose Machine and its ablations.

Three ways of running the same building blocks:

* ``LSTM_PM``: stage 1 feeds ``F(x) ++ F0(x) ++ center`` through the first
  LSTM step; later stages feed ``F(x_t) ++ b_{t-1} ++ center`` through a full
  step. The generator ``G`` turns the hidden state into beliefs.
* ``RPM``: the LSTM is removed; ``G'`` consumes the concatenation directly.
* CPM-style baseline: the LSTM_PM stages applied S times to one frame, used
  only as the per-frame multi-stage reference for timing.

Every stage reads the same ``F``, LSTM and generator tensors, so the
parameter set does not depend on the sequence length.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator, Optional, Sequence

import numpy as np

from . import checkpoint
from .config import ModelConfig, model_config_from_dict, to_dict
from .conv_lstm import ConvLstmParams, GateValues, LstmState, lstm_first_step_detailed, lstm_step_detailed
from .heatmap import make_center_map
from .tensor import Tensor, concat_channels, conv2d, dropout, max_pool2d, relu


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------- layouts


@dataclass(frozen=True)
class Layer:
    kind: str  # "conv" | "relu" | "pool" | "dropout"
    cin: int = 0
    cout: int = 0
    k: int = 0

    @property
    def pad(self) -> int:
        return self.k // 2


def encoder_layout(cfg: ModelConfig) -> list[Layer]:
    """Shared per-frame encoder: one 3x3 conv per pooling level, then a widening conv."""
    mid = max(cfg.feature_channels // 2, 1)
    layers = [Layer("conv", cfg.input_channels, mid, 3), Layer("relu")]
    for level in range(cfg.num_pools):
        if level:
            layers += [Layer("conv", mid, mid, 3), Layer("relu")]
        layers.append(Layer("pool", k=2))
    layers += [Layer("conv", mid, cfg.feature_channels, 3), Layer("relu")]
    return layers


def initial_layout(cfg: ModelConfig) -> list[Layer]:
    fc, out = cfg.feature_channels, cfg.belief_channels
    return encoder_layout(cfg) + [
        Layer("conv", fc, fc, 3), Layer("relu"), Layer("dropout"), Layer("conv", fc, out, 1),
    ]


def generator_layout(cfg: ModelConfig, cin: int) -> list[Layer]:
    gc = cfg.generator_channels
    return [Layer("conv", cin, gc, 3), Layer("relu"), Layer("conv", gc, cfg.belief_channels, 1)]


def segment_layouts(cfg: ModelConfig) -> dict[str, list[Layer]]:
    segs = {"F0": initial_layout(cfg), "F": encoder_layout(cfg)}
    if cfg.variant == "RPM":
        segs["Gp"] = generator_layout(cfg, cfg.lstm_in_channels)
    else:
        segs["G"] = generator_layout(cfg, cfg.memory_channels)
    return segs


# ---------------------------------------------------------------- parameters


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    @property
    def lstm(self) -> ConvLstmParams:
        t = self.tensors
        return ConvLstmParams(t["lstm.wx"], t["lstm.wh"], t["lstm.bias"])

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def payload(self) -> bytes:
        """Raw float32 little-endian bytes of every tensor, in canonical order."""
        return b"".join(np.ascontiguousarray(t.data, dtype="<f4").tobytes() for t in self.tensors.values())

    def to_bytes(self) -> bytes:
        return checkpoint.encode({k: t.data for k, t in self.tensors.items()},
                                 {"kind": "params", "config": to_dict(self.config)})

    def save(self, path, extra: Optional[dict] = None) -> None:
        header = {"kind": "params", "config": to_dict(self.config), **(extra or {})}
        checkpoint.write(path, {k: t.data for k, t in self.tensors.items()}, header)

    @classmethod
    def load(cls, path, dtype=np.float32) -> "ModelParams":
        header, arrays = checkpoint.read(path)
        if header.get("kind") != "params":
            raise checkpoint.CheckpointError(f"{path}: not a parameter checkpoint (kind={header.get('kind')!r})")
        cfg = model_config_from_dict(header["config"])
        cfg.validate()
        expected = init_params(cfg, seed=0, dtype=dtype)
        for name, t in expected.items():
            if name not in arrays:
                raise checkpoint.CheckpointError(f"{path}: missing tensor {name!r}")
            if arrays[name].shape != t.shape:
                raise checkpoint.CheckpointError(
                    f"{path}: tensor {name!r} has shape {arrays[name].shape}, config expects {t.shape}")
            t.data = arrays[name].astype(dtype)
        return expected

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(t.data.astype(dtype), requires_grad=True)
                                         for k, t in self.tensors.items()})


def _uniform(rng, shape, fan_in, dtype):
    s = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-s, s, size=shape).astype(dtype), requires_grad=True)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Fan-in uniform kernels, zero biases; forget-gate bias starts at 1."""
    cfg.validate()
    rng = np.random.Generator(np.random.Philox(seed))
    tensors: dict[str, Tensor] = {}
    for seg, layers in segment_layouts(cfg).items():
        if seg == "G":
            lstm = ConvLstmParams.init(cfg.lstm_in_channels, cfg.memory_channels, rng, dtype=dtype)
            tensors.update({f"lstm.{k}": t for k, t in lstm.tensors().items()})
        _init_segment(tensors, seg, layers, rng, dtype)
    return ModelParams(cfg, tensors)


def _init_segment(tensors, seg, layers, rng, dtype):
    for i, layer in enumerate(layers):
        if layer.kind != "conv":
            continue
        fan_in = layer.cin * layer.k * layer.k
        tensors[f"{seg}.{i}.w"] = _uniform(rng, (layer.cout, layer.cin, layer.k, layer.k), fan_in, dtype)
        tensors[f"{seg}.{i}.b"] = Tensor(np.zeros(layer.cout, dtype=dtype), requires_grad=True)


# ---------------------------------------------------------------- forward


@dataclass
class RunMode:
    """Training switches; the default is deterministic evaluation."""
    training: bool = False
    rng: Optional[np.random.Generator] = None


EVAL = RunMode()


def run_segment(x: Tensor, params: ModelParams, seg: str, mode: RunMode = EVAL) -> Tensor:
    cfg = params.config
    for i, layer in enumerate(segment_layouts(cfg)[seg]):
        if layer.kind == "conv":
            x = conv2d(x, params[f"{seg}.{i}.w"], params[f"{seg}.{i}.b"], 1, layer.pad)
        elif layer.kind == "relu":
            x = relu(x)
        elif layer.kind == "pool":
            x = max_pool2d(x, layer.k, layer.k)
        elif layer.kind == "dropout" and mode.training and cfg.dropout > 0:
            x = dropout(x, cfg.dropout, mode.rng)
    return x


@lru_cache(maxsize=32)
def _center(size: int, sigma: float, dtype_name: str) -> np.ndarray:
    return make_center_map(size, sigma, dtype=np.dtype(dtype_name)).data


def center_for(frame: Tensor, cfg: ModelConfig, size: Optional[int] = None) -> Tensor:
    """Center map matching ``frame``'s batch layout (constant, never tracked)."""
    size = size if size is not None else frame.shape[-1] // cfg.downsample_factor
    sigma = cfg.resolved_center_sigma * size / cfg.heatmap_size
    c = _center(size, float(sigma), frame.dtype.name)
    if frame.ndim == 4:
        c = np.broadcast_to(c, (frame.shape[0],) + c.shape)
    return Tensor(c, dtype=frame.dtype)


def _check_frame(frame: Tensor, cfg: ModelConfig) -> None:
    if frame.ndim not in (3, 4) or frame.shape[-3] != cfg.input_channels:
        raise ModelError(f"frame shape {frame.shape} does not match {cfg.input_channels} input channels")
    h, w = frame.shape[-2:]
    if h % cfg.downsample_factor or w % cfg.downsample_factor:
        raise ModelError(f"frame size {h}x{w} not divisible by downsampleFactor {cfg.downsample_factor}")


def _lstm_params(params: ModelParams) -> ConvLstmParams:
    if params.config.variant == "RPM":
        raise ModelError("RPM parameters have no LSTM")
    return params.lstm


@dataclass
class StageOutput:
    beliefs: Tensor
    state: Optional[LstmState] = None
    gates: Optional[GateValues] = None
    preliminary: Optional[Tensor] = None


def first_stage(frame: Tensor, params: ModelParams, center: Optional[Tensor] = None,
                mode: RunMode = EVAL) -> StageOutput:
    cfg = params.config
    _check_frame(frame, cfg)
    lstm = _lstm_params(params)
    center = center if center is not None else center_for(frame, cfg)
    prelim = run_segment(frame, params, "F0", mode)
    x = concat_channels([run_segment(frame, params, "F", mode), prelim, center])
    state, gates = lstm_first_step_detailed(x, lstm)
    return StageOutput(run_segment(state.h, params, "G", mode), state, gates, prelim)


def next_stage(frame: Tensor, prev_beliefs: Tensor, prev_state: LstmState, params: ModelParams,
               center: Optional[Tensor] = None, mode: RunMode = EVAL) -> StageOutput:
    cfg = params.config
    _check_frame(frame, cfg)
    lstm = _lstm_params(params)
    center = center if center is not None else center_for(frame, cfg)
    x = concat_channels([run_segment(frame, params, "F", mode), prev_beliefs, center])
    state, gates = lstm_step_detailed(x, prev_state, lstm)
    return StageOutput(run_segment(state.h, params, "G", mode), state, gates)


def forward_first_stage(frame: Tensor, params: ModelParams, center: Optional[Tensor] = None,
                        mode: RunMode = EVAL) -> tuple[Tensor, LstmState]:
    out = first_stage(frame, params, center, mode)
    return out.beliefs, out.state


def forward_stage(frame: Tensor, prev_beliefs: Tensor, prev_state: LstmState, params: ModelParams,
                  center: Optional[Tensor] = None, mode: RunMode = EVAL) -> tuple[Tensor, LstmState]:
    out = next_stage(frame, prev_beliefs, prev_state, params, center, mode)
    return out.beliefs, out.state


def run_lstm_sequence(frames: Sequence[Tensor], params: ModelParams, mode: RunMode = EVAL) -> list[StageOutput]:
    if len(frames) == 0:
        raise ModelError("empty frame sequence")
    shape = frames[0].shape
    for t, f in enumerate(frames):
        if f.shape != shape:
            raise ModelError(f"frame {t} has shape {f.shape}, expected {shape}")
    center = center_for(frames[0], params.config)
    outs = [first_stage(frames[0], params, center, mode)]
    for frame in frames[1:]:
        prev = outs[-1]
        outs.append(next_stage(frame, prev.beliefs, prev.state, params, center, mode))
    return outs


def forward_rpm_sequence(frames: Sequence[Tensor], params: ModelParams, mode: RunMode = EVAL) -> list[Tensor]:
    cfg = params.config
    if cfg.variant != "RPM":
        raise ModelError(f"forward_rpm_sequence needs RPM parameters, got {cfg.variant}")
    if len(frames) == 0:
        raise ModelError("empty frame sequence")
    for f in frames:
        _check_frame(f, cfg)
        if f.shape != frames[0].shape:
            raise ModelError(f"frame shape {f.shape} differs from {frames[0].shape}")
    center = center_for(frames[0], cfg)
    beliefs = run_segment(frames[0], params, "F0", mode)
    out = []
    for frame in frames:
        x = concat_channels([run_segment(frame, params, "F", mode), beliefs, center])
        beliefs = run_segment(x, params, "Gp", mode)
        out.append(beliefs)
    return out


def forward_sequence(frames: Sequence[Tensor], params: ModelParams, mode: RunMode = EVAL) -> list[Tensor]:
    """Beliefs for every frame; dispatches on the configured variant."""
    if params.config.variant == "RPM":
        return forward_rpm_sequence(frames, params, mode)
    return [o.beliefs for o in run_lstm_sequence(frames, params, mode)]


def forward_cpm_baseline(frame: Tensor, params: ModelParams, stages: int, mode: RunMode = EVAL) -> Tensor:
    """S stages on one frame, re-encoding the frame at each stage.

    Unlike a classic multistage model, all S stages reuse the shared weights; the baseline
    exists only to compare per-frame cost at equal per-stage work.
    """
    if stages < 1:
        raise ModelError(f"stages must be >= 1, got {stages}")
    return forward_sequence([frame] * stages, params, mode)[-1]
