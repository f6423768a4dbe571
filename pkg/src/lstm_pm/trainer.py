"""Multi-stage heatmap loss, SGD with momentum, and the resumable training loop.

Every random draw in the loop (batch order, window offsets, augmentation,
dropout) is derived from ``(seed, iteration)``, so resuming from a
checkpoint replays exactly the same stream as an uninterrupted run.
"""
from __future__ import annotations

import contextlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint
from .augment import AugmentRanges, augment_sequence
from .config import ModelConfig, TrainConfig, to_dict
from .heatmap import encode_labels
from .model import ModelParams, RunMode, forward_sequence, init_params
from .synth import PoseSequence, skeleton
from .tensor import NonFiniteError, ShapeError, Tape, Tensor, add, backward, scale, sum_sq_diff

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.lpm"
OPTSTATE_NAME = "optstate.lpm"
METRICS_NAME = "metrics.jsonl"


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"non-finite loss {loss} at iteration {iteration}")
        self.iteration = iteration


def derived_rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


# ---------------------------------------------------------------- loss


def compute_loss(beliefs: Sequence[Tensor], targets: Sequence[Tensor]) -> Tensor:
    """Sum of squared errors over all stages, parts and pixels (no averaging)."""
    if len(beliefs) != len(targets):
        raise ShapeError(f"{len(beliefs)} belief stages but {len(targets)} target stages")
    if not beliefs:
        raise ShapeError("compute_loss: no stages")
    total = None
    for b, g in zip(beliefs, targets):
        term = sum_sq_diff(b, g)
        total = term if total is None else add(total, term)
    return total


# ---------------------------------------------------------------- optimizer


@dataclass
class OptState:
    velocity: dict[str, np.ndarray]
    iteration: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "OptState":
        return cls({k: np.zeros_like(t.data) for k, t in params.items()})

    def save(self, path, config: ModelConfig) -> None:
        checkpoint.write(path, {f"v.{k}": v for k, v in self.velocity.items()},
                         {"kind": "optState", "iteration": self.iteration, "config": to_dict(config)})

    @classmethod
    def load(cls, path, params: ModelParams) -> "OptState":
        header, arrays = checkpoint.read(path)
        if header.get("kind") != "optState":
            raise checkpoint.CheckpointError(f"{path}: not an optimizer-state file")
        vel = {}
        for k, t in params.items():
            v = arrays.get(f"v.{k}")
            if v is None or v.shape != t.shape:
                raise checkpoint.CheckpointError(f"{path}: velocity for {k!r} missing or misshaped")
            vel[k] = v.astype(t.dtype)
        return cls(vel, int(header["iteration"]))


def learning_rate(cfg: TrainConfig, iteration: int) -> float:
    """Step decay: multiply by ``lr_drop_factor`` every ``lr_drop_every`` iterations."""
    return cfg.learning_rate * cfg.lr_drop_factor ** (iteration // cfg.lr_drop_every)


def global_norm(params: ModelParams) -> float:
    return float(np.sqrt(sum(float(np.sum(t.grad.astype(np.float64) ** 2))
                             for t in params if t.grad is not None)))


def clip_gradients(params: ModelParams, max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(params)
    if norm > max_norm > 0:
        k = max_norm / norm
        for t in params:
            if t.grad is not None:
                t.grad *= t.dtype.type(k)
    return norm


def sgd_update(params: ModelParams, opt: OptState, lr: float, cfg: TrainConfig) -> None:
    m, wd = cfg.momentum, cfg.weight_decay
    for name, t in params.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        v = opt.velocity[name]
        v *= t.dtype.type(m)
        v -= t.dtype.type(lr) * (g + t.dtype.type(wd) * t.data)
        t.data += v


# ---------------------------------------------------------------- steps


def stack_batch(batch: Sequence[tuple]) -> tuple[list[Tensor], list[Tensor]]:
    if not batch:
        raise ValueError("empty batch")
    T = len(batch[0][0])
    for frames, targets in batch:
        if len(frames) != T or len(targets) != T:
            raise ShapeError(f"all sequences in a batch need length {T}")

    def arr(x):
        return x.data if isinstance(x, Tensor) else np.asarray(x)

    frames = [Tensor(np.stack([arr(s[0][t]) for s in batch])) for t in range(T)]
    targets = [Tensor(np.stack([arr(s[1][t]) for s in batch])) for t in range(T)]
    return frames, targets


def train_step(batch: Sequence[tuple], params: ModelParams, opt: OptState, cfg: TrainConfig,
               rng: Optional[np.random.Generator] = None, lr: Optional[float] = None) -> tuple[float, OptState]:
    """One forward/backward/update on a batch of ``(frames, targets)`` pairs.

    The loss is the per-sequence sum of squared errors averaged over the batch.
    """
    it = opt.iteration
    frames, targets = stack_batch(batch)
    frames = [Tensor(f.data.astype(params.dtype)) for f in frames]
    targets = [Tensor(g.data.astype(params.dtype)) for g in targets]
    rng = rng if rng is not None else derived_rng(cfg.seed, 3, it)
    params.zero_grad()
    try:
        with Tape() as tape:
            beliefs = forward_sequence(frames, params, RunMode(training=True, rng=rng))
            loss = scale(compute_loss(beliefs, targets), 1.0 / len(batch))
    except NonFiniteError:
        raise DivergenceError(it, float("nan")) from None
    value = float(loss.data)
    if not np.isfinite(value):
        raise DivergenceError(it, value)
    backward(loss, tape)
    clip_gradients(params, cfg.grad_clip)
    sgd_update(params, opt, learning_rate(cfg, it) if lr is None else lr, cfg)
    params.zero_grad()
    opt.iteration = it + 1
    return value, opt


# ---------------------------------------------------------------- loop


def _sample_index(seed: int, position: int, n: int) -> int:
    epoch, k = divmod(position, n)
    return int(derived_rng(seed, 1, epoch).permutation(n)[k])


def make_example(seq: PoseSequence, model_cfg: ModelConfig, cfg: TrainConfig, seed: int,
                 iteration: int, slot: int) -> tuple[list[np.ndarray], list[Tensor]]:
    """Window of ``model_cfg.seq_len`` frames, augmented, with heatmap targets."""
    T = model_cfg.seq_len
    if len(seq) < T:
        raise ValueError(f"sequence {seq.seq_id!r} has {len(seq)} frames, need {T}")
    rng = derived_rng(seed, 2, iteration, slot)
    start = int(rng.integers(0, len(seq) - T + 1))
    window = PoseSequence(seq.frames[start:start + T], seq.joints[start:start + T],
                          seq.occluded[start:start + T], seq.seq_id, seq.seed)
    if cfg.augment:
        ranges = AugmentRanges(tuple(cfg.scale_range), tuple(cfg.rotate_deg), cfg.flip_prob,
                               model_cfg.input_size)
        window = augment_sequence(window, int(rng.integers(2**63)), ranges,
                                  skeleton(model_cfg.num_joints)[1])
    targets = [encode_labels(j, model_cfg.heatmap_size, model_cfg.downsample_factor, model_cfg.label_sigma)
               for j in window.joints]
    return list(window.frames), targets


def _deterministic(cfg: TrainConfig):
    return threadpool_limits(limits=1) if cfg.deterministic else contextlib.nullcontext()


@dataclass
class TrainResult:
    checkpoint: Path
    losses: list[float] = field(default_factory=list)
    iteration: int = 0


def _truncate_metrics(path: Path, upto: int) -> None:
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines() if line.strip()
            and json.loads(line)["iteration"] <= upto]
    path.write_text("".join(line + "\n" for line in keep))


def train_loop(dataset: Sequence[PoseSequence], model_cfg: ModelConfig, cfg: TrainConfig,
               checkpoint_dir, resume: bool = True, params: Optional[ModelParams] = None) -> TrainResult:
    """Train for ``cfg.total_iterations`` steps, checkpointing into ``checkpoint_dir``.

    If the directory already holds a checkpoint and optimizer state (and
    ``resume`` is set) training continues from the stored iteration.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    cfg.validate()
    out = Path(checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, opt_path, metrics = out / CHECKPOINT_NAME, out / OPTSTATE_NAME, out / METRICS_NAME

    if resume and ckpt.exists() and opt_path.exists():
        params = ModelParams.load(ckpt)
        if to_dict(params.config) != to_dict(model_cfg):
            raise checkpoint.CheckpointError(f"{ckpt}: stored model config differs from the requested one")
        opt = OptState.load(opt_path, params)
        _truncate_metrics(metrics, opt.iteration)
        log.info("resuming from %s at iteration %d", ckpt, opt.iteration)
    else:
        params = params if params is not None else init_params(model_cfg, seed=cfg.seed)
        opt = OptState.zeros(params)
        if metrics.exists():
            metrics.unlink()

    result = TrainResult(ckpt)
    with _deterministic(cfg), open(metrics, "a") as mlog:
        while opt.iteration < cfg.total_iterations:
            it = opt.iteration
            batch = []
            for slot in range(cfg.batch_size):
                seq = dataset[_sample_index(cfg.seed, it * cfg.batch_size + slot, len(dataset))]
                batch.append(make_example(seq, model_cfg, cfg, cfg.seed, it, slot))
            lr = learning_rate(cfg, it)
            loss, opt = train_step(batch, params, opt, cfg, lr=lr)
            result.losses.append(loss)
            done = opt.iteration
            if done % cfg.log_every == 0 or done == cfg.total_iterations:
                mlog.write(json.dumps({"iteration": done, "loss": loss, "lr": lr}) + "\n")
                mlog.flush()
                log.info("iter %d loss %.4f lr %.3g", done, loss, lr)
            if done % cfg.checkpoint_every == 0 or done == cfg.total_iterations:
                params.save(ckpt, {"iteration": done})
                opt.save(opt_path, params.config)
    if not ckpt.exists():
        params.save(ckpt, {"iteration": opt.iteration})
        opt.save(opt_path, params.config)
    result.iteration = opt.iteration
    return result
