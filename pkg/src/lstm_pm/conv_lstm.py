"""Convolutional vanilla LSTM cell.

The four input-to-gate kernels are stored as one fused ``4M x Cx x 3 x 3``
tensor (gate order g, i, f, o), and likewise the hidden-to-gate kernels and
the biases, so each step costs two convolutions. Per-gate views are exposed
for inspection and tests.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    conv2d,
    mul,
    sigmoid,
    slice_channels,
    tanh,
)

GATES = ("g", "i", "f", "o")
KERNEL = 3
PAD = 1


@dataclass
class ConvLstmParams:
    wx: Tensor  # 4M x Cx x 3 x 3
    wh: Tensor  # 4M x M x 3 x 3
    bias: Tensor  # 4M

    @property
    def memory_channels(self) -> int:
        return self.wh.shape[1]

    @property
    def in_channels(self) -> int:
        return self.wx.shape[1]

    def gate_slice(self, gate: str) -> slice:
        m = self.memory_channels
        k = GATES.index(gate)
        return slice(k * m, (k + 1) * m)

    def kernel_x(self, gate: str) -> np.ndarray:
        return self.wx.data[self.gate_slice(gate)]

    def kernel_h(self, gate: str) -> np.ndarray:
        return self.wh.data[self.gate_slice(gate)]

    def gate_bias(self, gate: str) -> np.ndarray:
        return self.bias.data[self.gate_slice(gate)]

    def tensors(self) -> dict:
        return {"wx": self.wx, "wh": self.wh, "bias": self.bias}

    @classmethod
    def init(cls, in_channels: int, memory_channels: int, rng: np.random.Generator,
             forget_bias: float = 1.0, dtype=np.float32) -> "ConvLstmParams":
        m = memory_channels

        def uniform(shape):
            s = np.sqrt(1.0 / (shape[1] * shape[2] * shape[3]))
            return Tensor(rng.uniform(-s, s, size=shape).astype(dtype), requires_grad=True)

        wx = uniform((4 * m, in_channels, KERNEL, KERNEL))
        wh = uniform((4 * m, m, KERNEL, KERNEL))
        bias = np.zeros(4 * m, dtype=dtype)
        bias[2 * m:3 * m] = forget_bias
        return cls(wx, wh, Tensor(bias, requires_grad=True))


@dataclass
class LstmState:
    c: Tensor
    h: Tensor

    def __post_init__(self):
        if self.c.shape != self.h.shape:
            raise ShapeError(f"LstmState: C {self.c.shape} and h {self.h.shape} differ")

    @classmethod
    def zeros(cls, shape, dtype=np.float32) -> "LstmState":
        return cls(Tensor(np.zeros(shape, dtype=dtype)), Tensor(np.zeros(shape, dtype=dtype)))


@dataclass
class GateValues:
    """Intermediate tensors of one step, kept for memory visualization."""
    g: Tensor
    i: Tensor
    f: Tensor
    o: Tensor
    retained: Tensor | None  # f * C_prev; None on the first step
    selected: Tensor  # i * g


def _check_input(x: Tensor, p: ConvLstmParams) -> None:
    if x.ndim not in (3, 4) or x.shape[-3] != p.in_channels:
        raise ShapeError(f"lstm: input {x.shape} does not match gate kernels {p.wx.shape}")


def _gates(z: Tensor, m: int):
    g = tanh(slice_channels(z, 0, m))
    i = sigmoid(slice_channels(z, m, 2 * m))
    f = sigmoid(slice_channels(z, 2 * m, 3 * m))
    o = sigmoid(slice_channels(z, 3 * m, 4 * m))
    return g, i, f, o


def lstm_step_detailed(x: Tensor, prev: LstmState, p: ConvLstmParams) -> tuple[LstmState, GateValues]:
    _check_input(x, p)
    m = p.memory_channels
    if prev.c.shape[-3] != m or prev.c.shape[-2:] != x.shape[-2:] or prev.c.ndim != x.ndim:
        raise ShapeError(f"lstm: state {prev.c.shape} does not match input {x.shape} / M={m}")
    z = add(conv2d(x, p.wx, p.bias, 1, PAD), conv2d(prev.h, p.wh, None, 1, PAD))
    g, i, f, o = _gates(z, m)
    retained = mul(f, prev.c)
    selected = mul(i, g)
    c = add(retained, selected)
    h = mul(o, tanh(c))
    return LstmState(c, h), GateValues(g, i, f, o, retained, selected)


def lstm_first_step_detailed(x: Tensor, p: ConvLstmParams) -> tuple[LstmState, GateValues]:
    # h0 = 0, so the hidden-to-gate convolutions vanish and there is no forget term.
    _check_input(x, p)
    m = p.memory_channels
    z = conv2d(x, p.wx, p.bias, 1, PAD)
    g, i, f, o = _gates(z, m)
    c = mul(i, g)
    h = mul(o, tanh(c))
    return LstmState(c, h), GateValues(g, i, f, o, None, c)


def lstm_step(x: Tensor, prev: LstmState, p: ConvLstmParams) -> LstmState:
    return lstm_step_detailed(x, prev, p)[0]


def lstm_first_step(x: Tensor, p: ConvLstmParams) -> LstmState:
    return lstm_first_step_detailed(x, p)[0]
