"""Inference-speed harness, analytic MAC model, and memory-cell visualization."""
from __future__ import annotations

import re
import statistics
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from .config import ModelConfig, SynthConfig
from .model import Layer, ModelParams, forward_cpm_baseline, forward_sequence, run_lstm_sequence, segment_layouts
from .synth import generate_sequence
from .tensor import Tensor, conv_output_size, upsample_bilinear

MEMORY_PHASES = ("memory_prev", "after_forget", "selected_input", "memory_new")


class BenchError(ValueError):
    pass


# ---------------------------------------------------------------- cost model


def parse_mode(mode: str) -> tuple[str, int]:
    if mode == "recurrent":
        return "recurrent", 1
    m = re.fullmatch(r"multistage-(\d+)", mode)
    if m and int(m.group(1)) >= 1:
        return "multistage", int(m.group(1))
    raise BenchError(f"unknown mode {mode!r}; expected 'recurrent' or 'multistage-S'")


def segment_macs(layers: Sequence[Layer], size: int) -> tuple[int, int]:
    """Multiply-accumulates of the conv layers in a segment and its output size."""
    total = 0
    for layer in layers:
        if layer.kind == "conv":
            size = conv_output_size(size, layer.k, 1, layer.pad)
            total += layer.cout * layer.cin * layer.k * layer.k * size * size
        elif layer.kind == "pool":
            size = conv_output_size(size, layer.k, layer.k, 0)
    return total, size


def mac_breakdown(cfg: ModelConfig) -> dict[str, int]:
    """Per-invocation MACs of each network piece at the configured resolution."""
    segs = segment_layouts(cfg)
    hm = cfg.heatmap_size
    out = {"F0": segment_macs(segs["F0"], cfg.input_size)[0],
           "F": segment_macs(segs["F"], cfg.input_size)[0]}
    if cfg.variant == "RPM":
        out["Gp"] = segment_macs(segs["Gp"], hm)[0]
    else:
        m, cx = cfg.memory_channels, cfg.lstm_in_channels
        out["lstm_x"] = 4 * m * cx * 9 * hm * hm
        out["lstm_h"] = 4 * m * m * 9 * hm * hm
        out["G"] = segment_macs(segs["G"], hm)[0]
    return out


def stage_macs(cfg: ModelConfig) -> tuple[int, int]:
    """``(first stage, later stage)`` MACs."""
    b = mac_breakdown(cfg)
    if cfg.variant == "RPM":
        return b["F0"] + b["F"] + b["Gp"], b["F"] + b["Gp"]
    return b["F0"] + b["F"] + b["lstm_x"] + b["G"], b["F"] + b["lstm_x"] + b["lstm_h"] + b["G"]


def count_macs(cfg: ModelConfig, mode: str, n_frames: int = 1) -> int:
    """Total conv MACs to process ``n_frames`` frames in the given mode.

    ``recurrent``: one initial stage, then one short stage per further frame.
    ``multistage-S``: every frame independently runs S stages.
    """
    kind, stages = parse_mode(mode)
    first, later = stage_macs(cfg)
    if n_frames < 1:
        raise BenchError("n_frames must be >= 1")
    if kind == "recurrent":
        return first + (n_frames - 1) * later
    return n_frames * (first + (stages - 1) * later)


# ---------------------------------------------------------------- timing


def bench_clip(cfg: ModelConfig, n_frames: int, seed: int = 0) -> list[Tensor]:
    synth = SynthConfig(image_size=cfg.input_size, occlusion_prob=0.0,
                        figure_height=cfg.input_size * 0.45, joint_radius=max(1.5, cfg.input_size / 26),
                        limb_width=max(1.0, cfg.input_size / 43), center_jitter=cfg.input_size / 16)
    seq = generate_sequence(seed, synth, n_frames)
    frames = seq.frames
    if cfg.input_channels != frames.shape[1]:
        frames = np.resize(frames, (n_frames, cfg.input_channels) + frames.shape[2:])
    return [Tensor(f) for f in frames]


def _run(frames, params, kind, stages):
    if kind == "recurrent":
        forward_sequence(frames, params)
    else:
        for f in frames:
            forward_cpm_baseline(f, params, stages)


def bench_inference(params: ModelParams, n_frames: int = 100, mode: str = "recurrent",
                    repeats: int = 5, warmup: int = 3, frames: Optional[list] = None) -> dict:
    """Median wall-clock over ``repeats`` runs after ``warmup`` discarded runs, single-threaded."""
    kind, stages = parse_mode(mode)
    if kind == "recurrent" and n_frames < 2:
        raise BenchError("recurrent mode needs at least 2 frames")
    if repeats < 1 or warmup < 0:
        raise BenchError("repeats must be >= 1 and warmup >= 0")
    frames = frames if frames is not None else bench_clip(params.config, n_frames)
    frames = [Tensor(f.data.astype(params.dtype)) for f in frames[:n_frames]]
    times = []
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            _run(frames, params, kind, stages)
        for _ in range(repeats):
            t0 = time.perf_counter()
            _run(frames, params, kind, stages)
            times.append(time.perf_counter() - t0)
    total_ms = 1000 * statistics.median(times)
    macs = count_macs(params.config, mode, n_frames)
    return {"mode": kind, "S": stages if kind == "multistage" else None, "nFrames": n_frames,
            "perFrameMs": total_ms / n_frames, "totalMs": total_ms,
            "macCount": macs, "macPerFrame": macs / n_frames, "timesMs": [1000 * t for t in times]}


def compare_speed(params: ModelParams, n_frames: int = 100, stages: int = 6, repeats: int = 5,
                  warmup: int = 3) -> list[dict]:
    """Recurrent vs multistage-S reports, each with ``ratioVsBaseline`` (baseline time / own time)."""
    frames = bench_clip(params.config, n_frames)
    base = bench_inference(params, n_frames, f"multistage-{stages}", repeats, warmup, frames)
    rec = bench_inference(params, n_frames, "recurrent", repeats, warmup, frames)
    base["ratioVsBaseline"] = 1.0
    rec["ratioVsBaseline"] = base["perFrameMs"] / rec["perFrameMs"]
    rec["macRatioVsBaseline"] = base["macCount"] / rec["macCount"]
    return [rec, base]


# ---------------------------------------------------------------- memory capture


def capture_memory_phases(frames: Sequence[Tensor], params: ModelParams) -> list[dict]:
    """Per stage: previous memory, memory after forgetting, selected input, new memory, h, beliefs.

    Stage 1 has no previous memory, so only ``selected_input`` (== new memory) is recorded there.
    """
    if params.config.variant == "RPM":
        raise BenchError("memory phases need an LSTM variant; RPM has no memory cell")
    outs = run_lstm_sequence(frames, params)
    phases = []
    prev_c = None
    for t, o in enumerate(outs):
        rec = {"stage": t + 1,
               "selected_input": o.gates.selected.data,
               "memory_new": o.state.c.data,
               "hidden": o.state.h.data,
               "beliefs": o.beliefs.data}
        if t > 0:
            rec["memory_prev"] = prev_c
            rec["after_forget"] = o.gates.retained.data
        prev_c = o.state.c.data
        phases.append(rec)
    return phases


def normalize_channel(a: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant channel maps to mid-gray."""
    lo, hi = float(a.min()), float(a.max())
    if hi - lo <= 1e-12:
        return np.full(a.shape, 0.5)
    return (a.astype(np.float64) - lo) / (hi - lo)


def channel_image(a: np.ndarray, out_h: int, out_w: int, frame: Optional[np.ndarray] = None,
                  alpha: float = 0.5) -> Image.Image:
    up = upsample_bilinear(Tensor(normalize_channel(a)[None], dtype=np.float64), out_h, out_w).data[0]
    up = np.clip(up, 0, 1)
    if frame is None:
        return Image.fromarray(np.round(up * 255).astype(np.uint8), mode="L")
    rgb = (1 - alpha) * np.clip(frame, 0, 1).transpose(1, 2, 0) + alpha * up[..., None]
    return Image.fromarray(np.round(rgb * 255).astype(np.uint8), mode="RGB")


def export_memory_images(phases: Sequence[dict], channels: Sequence[int], out_dir,
                         frames: Optional[Sequence] = None, overlay: bool = False,
                         size: Optional[tuple] = None) -> list[Path]:
    """Write ``{stage}_{phase}_{channel}.png`` per stage, memory phase and selected channel."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc.strerror}") from exc
    m = phases[0]["memory_new"].shape[-3]
    for c in channels:
        if not 0 <= c < m:
            raise BenchError(f"channel {c} out of range for M={m}")
    if size is None:
        if frames is None:
            raise BenchError("need frames or an explicit output size")
        size = tuple(np.asarray(frames[0].data if isinstance(frames[0], Tensor) else frames[0]).shape[-2:])
    written = []
    for rec in phases:
        t = rec["stage"]
        frame = None
        if overlay and frames is not None:
            f = frames[t - 1]
            frame = np.asarray(f.data if isinstance(f, Tensor) else f)
        for phase in MEMORY_PHASES:
            if phase not in rec:
                continue
            for c in channels:
                img = channel_image(rec[phase][c], size[0], size[1], frame)
                path = out_dir / f"{t}_{phase}_{c}.png"
                try:
                    img.save(path, format="PNG")
                except OSError as exc:
                    raise OSError(f"cannot write {path}: {exc.strerror}") from exc
                written.append(path)
    return written
