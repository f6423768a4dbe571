"""Dense N-D tensors with a reverse-mode tape.

Feature maps use the ``C x H x W`` layout with an optional leading batch
extent (``N x C x H x W``). Every op accepts both ranks and returns the rank
it was given.

Recording is opt-in: operations are appended to the innermost active
:class:`Tape` only when at least one input requires a gradient::

    with Tape() as tape:
        loss = sum_sq_diff(conv2d(x, w, b), target)
    backward(loss, tape)
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class AutodiffError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_node", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: Optional[int] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


@dataclass
class _Node:
    op: str
    inputs: tuple
    backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]


class Tape:
    """Ordered record of executed operations.

    Nodes are appended as ops run, so the list is already in topological
    order; :func:`backward` walks it in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn=None) -> Tensor:
    """Wrap ``out_data`` as a tensor and log it on the active tape.

    ``backward_fn`` maps the output gradient to one gradient (or ``None``)
    per input. Ops registered without one raise on backward.
    """
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = len(tape.nodes)
        out._tape = tape
        tape.nodes.append(_Node(op, tuple(inputs), backward_fn))
    return out


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else loss._tape
    if tape is None or loss._node is None or loss._tape is not tape:
        raise AutodiffError("loss was not produced under the given tape")
    grads: list[Optional[np.ndarray]] = [None] * (loss._node + 1)
    grads[loss._node] = np.ones_like(loss.data)
    for idx in range(loss._node, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        grads[idx] = None
        node = tape.nodes[idx]
        if node.backward is None:
            raise AutodiffError(f"op '{node.op}' has no derivative rule")
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is not None and inp._tape is tape:
                prev = grads[inp._node]
                grads[inp._node] = gi if prev is None else prev + gi
            elif inp.grad is None:
                inp.grad = np.array(gi, dtype=inp.dtype, copy=True)
            else:
                inp.grad += gi


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def _finite(op: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            raise NonFiniteError(f"{op}: non-finite input")


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _as4d(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"{op}: expected C x H x W or N x C x H x W, got {x.shape}")


# ---------------------------------------------------------------- convolution


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # xp: padded N x C x H x W  ->  (C*kh*kw) x (N*ho*wo)
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for u in range(kh):
        for v in range(kw):
            cols[:, u, v] = xt[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = shape
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for u in range(kh):
        for v in range(kw):
            out[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += cols[:, u, v]
    out = out.transpose(1, 0, 2, 3)
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return out


def _check_conv(x: Tensor, w: Tensor, b: Optional[Tensor], stride: int, pad: int) -> tuple:
    x4, squeeze = _as4d(x, "conv2d")
    if w.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be Cout x Cin x kh x kw, got {w.shape}")
    cout, cin, kh, kw = w.shape
    if x4.shape[1] != cin:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernel {w.shape}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: invalid stride={stride} pad={pad}")
    h, wd = x4.shape[2:]
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    _finite("conv2d", x.data, w.data)
    if b is not None:
        _finite("conv2d", b.data)
    return x4, squeeze


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding via patch gathering and one GEMM."""
    x4, squeeze = _check_conv(x, w, b, stride, pad)
    n, cin, h, wd = x4.shape
    cout, _, kh, kw = w.shape
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(wd, kw, stride, pad)
    xp = np.pad(x4, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x4
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.data.reshape(cout, -1)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))
    if squeeze:
        out = out[0]

    def grad_fn(g):
        g2 = g.reshape(n, cout, ho * wo).transpose(1, 0, 2).reshape(cout, -1)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _col2im(wmat.T @ g2, x4.shape, kh, kw, stride, pad, ho, wo)
            gx = gx[0] if squeeze else gx
        if w.requires_grad:
            gw = (g2 @ cols.T).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=1)
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return record("conv2d", out, inputs, grad_fn)


def conv2d_reference(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Direct nested-loop convolution. Slow; kept as the oracle for :func:`conv2d`."""
    x4, squeeze = _check_conv(x, w, b, stride, pad)
    n, cin, h, wd = x4.shape
    cout, _, kh, kw = w.shape
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(wd, kw, stride, pad)
    out = np.zeros((n, cout, ho, wo), dtype=x4.dtype)
    wt = w.data
    for s in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b.data[o])
                    for c in range(cin):
                        for u in range(kh):
                            r = i * stride + u - pad
                            if r < 0 or r >= h:
                                continue
                            for v in range(kw):
                                q = j * stride + v - pad
                                if 0 <= q < wd:
                                    acc += float(x4[s, c, r, q]) * float(wt[o, c, u, v])
                    out[s, o, i, j] = acc
    return Tensor(out[0] if squeeze else out, dtype=x4.dtype)


# ---------------------------------------------------------------- pooling


def max_pool2d(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    """Windowed max; ties go to the first element in row-major window order."""
    stride = k if stride is None else stride
    if k < 1 or stride < 1:
        raise ValueError(f"max_pool2d: k and stride must be positive, got k={k} stride={stride}")
    x4, squeeze = _as4d(x, "max_pool2d")
    n, c, h, wd = x4.shape
    if k > h or k > wd:
        raise ShapeError(f"max_pool2d: window {k} larger than input {x.shape}")
    _finite("max_pool2d", x4)
    ho, wo = conv_output_size(h, k, stride, 0), conv_output_size(wd, k, stride, 0)
    best = None
    arg = np.zeros((n, c, ho, wo), dtype=np.int32)
    for u in range(k):
        for v in range(k):
            win = x4[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride]
            if best is None:
                best = win.copy()
                continue
            better = win > best
            best = np.where(better, win, best)
            arg[better] = u * k + v
    out = best[0] if squeeze else best

    def grad_fn(g):
        g4 = g[None] if squeeze else g
        gx = np.zeros_like(x4)
        for u in range(k):
            for v in range(k):
                sel = np.where(arg == u * k + v, g4, 0)
                gx[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += sel
        return (gx[0] if squeeze else gx,)

    return record("max_pool2d", np.ascontiguousarray(out), (x,), grad_fn)


# ---------------------------------------------------------------- elementwise


def relu(x: Tensor) -> Tensor:
    _finite("relu", x.data)
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    _finite("sigmoid", x.data)
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return record("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def tanh(x: Tensor) -> Tensor:
    _finite("tanh", x.data)
    y = np.tanh(x.data)
    return record("tanh", y, (x,), lambda g: (g * (1 - y * y),))


def add(x: Tensor, y: Tensor) -> Tensor:
    _same_shape("add", x, y)
    _finite("add", x.data, y.data)
    return record("add", x.data + y.data, (x, y), lambda g: (g, g))


def mul(x: Tensor, y: Tensor) -> Tensor:
    _same_shape("mul", x, y)
    _finite("mul", x.data, y.data)
    xd, yd = x.data, y.data
    return record("mul", xd * yd, (x, y), lambda g: (g * yd if x.requires_grad else None,
                                                      g * xd if y.requires_grad else None))


def scale(x: Tensor, c: float) -> Tensor:
    _finite("scale", x.data)
    c = x.dtype.type(c)
    return record("scale", x.data * c, (x,), lambda g: (g * c,))


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-rate)."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return record("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- channel ops


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels: empty part list")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or p.shape[:-3] != ref[:-3] or p.shape[-2:] != ref[-2:]:
            raise ShapeError(f"concat_channels: spatial mismatch {ref} vs {p.shape}")
    bounds = np.cumsum([0] + [p.shape[-3] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=-3)

    def grad_fn(g):
        return tuple(g[..., bounds[i]:bounds[i + 1], :, :] for i in range(len(parts)))

    return record("concat_channels", out, tuple(parts), grad_fn)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    c = x.shape[-3]
    if not 0 <= start < stop <= c:
        raise ShapeError(f"slice_channels: [{start}:{stop}] out of range for {x.shape}")
    out = np.ascontiguousarray(x.data[..., start:stop, :, :])

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop, :, :] = g
        return (gx,)

    return record("slice_channels", out, (x,), grad_fn)


# ---------------------------------------------------------------- resampling


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """``n_out x n_in`` interpolation matrix, half-pixel (align_corners=False) convention."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"upsample_bilinear: invalid output size {out_h}x{out_w}")
    h, w = x.shape[-2:]
    ah = bilinear_matrix(h, out_h, x.dtype)
    aw = bilinear_matrix(w, out_w, x.dtype)
    out = ah @ x.data @ aw.T
    return record("upsample_bilinear", out, (x,), lambda g: (ah.T @ g @ aw,))


# ---------------------------------------------------------------- reductions


def sum_sq_diff(a: Tensor, b: Tensor) -> Tensor:
    """Scalar sum of squared differences."""
    _same_shape("sum_sq_diff", a, b)
    _finite("sum_sq_diff", a.data, b.data)
    d = a.data - b.data
    d64 = d.astype(np.float64, copy=False).ravel()
    with np.errstate(over="ignore"):  # an unrepresentable loss becomes inf; callers treat that as divergence
        out = np.asarray(d64 @ d64, dtype=a.dtype)

    def grad_fn(g):
        two_d = 2 * g * d
        return (two_d if a.requires_grad else None, -two_d if b.requires_grad else None)

    return record("sum_sq_diff", out, (a, b), grad_fn)
