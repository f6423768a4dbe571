"""Command-line front end: ``lstm-pm {synth,train,eval,infer,bench,viz}``.

Configuration comes from a profile (``tiny`` or ``paper``), an optional JSON
file, and dotted overrides such as ``--train.learningRate 5e-4``. The fully
resolved config is printed before any work starts. Failures exit nonzero
with a single ``error: <kind>: <message>`` line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import config as C
from .checkpoint import CheckpointError
from .heatmap import decode_beliefs
from .model import ModelParams, forward_sequence, init_params
from .synth import (
    JOINT_COLORS,
    PoseSequence,
    export_manifest,
    generate_dataset,
    load_annotated_dataset,
    _letterbox,
)
from .tensor import Tensor

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--profile", default=None, choices=sorted(C.PROFILES))
    p.add_argument("--seed", type=int, default=None, help="experiment seed (data generation)")
    p.add_argument("--out", required=out_required, help="output directory; nothing is written elsewhere")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lstm-pm", description="LSTM Pose Machine desk-scale toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic video dataset")
    _common(p)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--length", type=int, default=None, help="frames per sequence (default: model T)")

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--data", help="manifest path (default: synthetic data from --seed)")
    p.add_argument("--count", type=int, default=200, help="synthetic training sequences")
    p.add_argument("--no-resume", action="store_true")

    p = sub.add_parser("eval", help="PCK evaluation of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="manifest path (default: synthetic test set)")
    p.add_argument("--count", type=int, default=None)

    p = sub.add_parser("infer", help="decode joints for a manifest or a directory of frames")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="manifest file or directory of frames")
    p.add_argument("--overlay", action="store_true", help="also write frames with joints drawn")

    p = sub.add_parser("bench", help="recurrent vs multi-stage inference speed")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--stages", type=int, default=6)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=3)

    p = sub.add_parser("viz", help="export LSTM memory phases for one sequence")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="manifest path (default: one synthetic sequence)")
    p.add_argument("--index", type=int, default=0, help="sequence index within the data")
    p.add_argument("--channels", default="0,1,2")
    p.add_argument("--overlay", action="store_true")
    return parser


def _parse_overrides(extra: list[str]) -> dict:
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for {tok}")
            i += 1
            value = extra[i]
        out[key] = value
        i += 1
    return out


def resolve_config(args, extra: list[str]) -> C.RunConfig:
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise C.ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise C.ConfigError(f"config {args.config} is not valid JSON: {exc}") from None
    overrides = _parse_overrides(extra)
    if args.seed is not None:
        overrides.setdefault("seed", args.seed)
    profile = args.profile or data.get("profile", "tiny")
    data.pop("profile", None)
    return C.resolve(profile, data, overrides)


def _print_config(cfg: C.RunConfig, command: str) -> None:
    print(json.dumps({"command": command, "seed": cfg.seed, "config": C.to_dict(cfg)}, sort_keys=True))
    sys.stdout.flush()


def _load_params(path: str, cfg: C.RunConfig) -> ModelParams:
    params = ModelParams.load(path)
    if params.config.num_joints != cfg.model.num_joints:
        raise C.ConfigError(f"checkpoint has P={params.config.num_joints} but config has P={cfg.model.num_joints}")
    if params.config.input_size != cfg.model.input_size:
        raise C.ConfigError(f"checkpoint inputSize={params.config.input_size} "
                            f"but config inputSize={cfg.model.input_size}")
    return params


def _dataset(args, cfg: C.RunConfig, count: int, seed: int, length: Optional[int] = None) -> list[PoseSequence]:
    if getattr(args, "data", None):
        return list(load_annotated_dataset(args.data, cfg.model.input_size, cfg.model.num_joints))
    return generate_dataset(seed, count, cfg.synth, length or cfg.model.seq_len)


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg):
    seqs = generate_dataset(cfg.seed, args.count, cfg.synth, args.length or cfg.model.seq_len)
    path = export_manifest(seqs, args.out)
    print(json.dumps({"manifest": str(path), "sequences": len(seqs)}))


def cmd_train(args, cfg):
    from .trainer import train_loop

    data = _dataset(args, cfg, args.count, cfg.seed)
    res = train_loop(data, cfg.model, cfg.train, args.out, resume=not args.no_resume)
    print(json.dumps({"checkpoint": str(res.checkpoint), "iteration": res.iteration,
                      "finalLoss": res.losses[-1] if res.losses else None}))


def cmd_eval(args, cfg):
    from .evaluator import evaluate, format_report

    params = _load_params(args.checkpoint, cfg)
    data = _dataset(args, cfg, args.count or cfg.eval.num_sequences, cfg.eval.seed)
    report = evaluate(params, data, cfg.eval.alpha, tuple(cfg.eval.scales))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(format_report(report, Path(args.checkpoint).stem))


def _frames_from_dir(path: Path, size: int) -> PoseSequence:
    from .heatmap import JointSet

    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise C.ConfigError(f"no image files in {path}")
    frames = []
    for f in files:
        with Image.open(f) as im:
            frames.append(_letterbox(im.convert("RGB"), size)[0])
    dummy = [JointSet(np.zeros((1, 2)), [False], [0, 0, 1, 1]) for _ in frames]
    return PoseSequence(np.stack(frames), dummy, np.zeros((len(frames), 1), dtype=bool), path.name)


def _draw_joints(frame: np.ndarray, joints: np.ndarray) -> Image.Image:
    img = np.clip(frame.transpose(1, 2, 0), 0, 1).copy()
    h, w = img.shape[:2]
    for j, (x, y, _) in enumerate(joints):
        xi, yi = int(round(x)), int(round(y))
        color = 1 - JOINT_COLORS[j % len(JOINT_COLORS)]
        img[max(yi - 1, 0):min(yi + 2, h), max(xi - 1, 0):min(xi + 2, w)] = color
    return Image.fromarray(np.round(img * 255).astype(np.uint8), mode="RGB")


def cmd_infer(args, cfg):
    params = _load_params(args.checkpoint, cfg)
    src = Path(args.data)
    if src.is_dir():
        seqs = [_frames_from_dir(src, cfg.model.input_size)]
    else:
        seqs = list(load_annotated_dataset(src, cfg.model.input_size, cfg.model.num_joints))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.jsonl", "w") as fh:
        for seq in seqs:
            beliefs = forward_sequence([Tensor(f) for f in seq.frames], params)
            for t, b in enumerate(beliefs):
                joints = decode_beliefs(b, params.config.downsample_factor)
                fh.write(json.dumps({"sequence": seq.seq_id, "frame": t, "joints": joints.tolist()}) + "\n")
                if args.overlay:
                    odir = out / "overlays" / seq.seq_id
                    odir.mkdir(parents=True, exist_ok=True)
                    _draw_joints(seq.frames[t], joints).save(odir / f"{t:04d}.png")
    print(json.dumps({"predictions": str(out / "predictions.jsonl"), "sequences": len(seqs)}))


def cmd_bench(args, cfg):
    from .bench import compare_speed

    params = _load_params(args.checkpoint, cfg) if args.checkpoint else init_params(cfg.model, cfg.seed)
    reports = compare_speed(params, args.frames, args.stages, args.repeats, args.warmup)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    keep = ("mode", "S", "nFrames", "perFrameMs", "macCount", "ratioVsBaseline")
    slim = [{k: r.get(k) for k in keep} for r in reports]
    (out / "bench.json").write_text(json.dumps(slim, indent=2) + "\n")
    for r in slim:
        label = "recurrent" if r["mode"] == "recurrent" else f"multistage-{r['S']}"
        print(f"{label:<14} {r['perFrameMs']:8.2f} ms/frame  {r['macCount'] / r['nFrames'] / 1e6:8.2f} MMAC/frame")
    print(f"speedup recurrent vs multistage-{args.stages}: {slim[0]['ratioVsBaseline']:.2f}x")


def cmd_viz(args, cfg):
    from .bench import capture_memory_phases, export_memory_images

    params = _load_params(args.checkpoint, cfg)
    data = _dataset(args, cfg, args.index + 1, cfg.seed)
    if not 0 <= args.index < len(data):
        raise C.ConfigError(f"sequence index {args.index} out of range ({len(data)} sequences)")
    seq = data[args.index]
    try:
        channels = [int(c) for c in args.channels.split(",") if c.strip()]
    except ValueError:
        raise UsageError(f"--channels must be comma-separated integers, got {args.channels!r}") from None
    frames = [Tensor(f) for f in seq.frames]
    phases = capture_memory_phases(frames, params)
    paths = export_memory_images(phases, channels, args.out, frames, overlay=args.overlay)
    print(json.dumps({"images": len(paths), "out": str(args.out)}))


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "infer": cmd_infer, "bench": cmd_bench, "viz": cmd_viz}


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args, extra = build_parser().parse_known_args(argv)
        cfg = resolve_config(args, extra)
        _print_config(cfg, args.command)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except (C.ConfigError, CheckpointError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
