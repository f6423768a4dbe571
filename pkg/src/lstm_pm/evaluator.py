"""PCK@alpha with visibility masking, multi-scale inference, and reports."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .heatmap import JointSet, decode_beliefs
from .model import ModelParams, forward_sequence
from .synth import PoseSequence, skeleton
from .tensor import Tensor, upsample_bilinear


class EvaluationError(ValueError):
    pass


@dataclass
class PckResult:
    per_joint: np.ndarray  # fraction correct per joint type; nan where never visible
    correct: np.ndarray
    total: np.ndarray
    alpha: float

    @property
    def mean(self) -> float:
        """Unweighted mean over joint types that had at least one visible instance."""
        return float(np.nanmean(self.per_joint))


def pck(preds: Sequence, gts: Sequence[JointSet], alpha: float = 0.2) -> PckResult:
    """A visible joint is correct iff its error is <= alpha * max(bbox w, bbox h)."""
    if len(preds) != len(gts):
        raise EvaluationError(f"{len(preds)} predictions for {len(gts)} ground-truth frames")
    if not gts:
        raise EvaluationError("no frames to evaluate")
    p = gts[0].num_joints
    correct = np.zeros(p, dtype=np.int64)
    total = np.zeros(p, dtype=np.int64)
    for pred, gt in zip(preds, gts):
        xy = np.asarray(pred, dtype=np.float64)[:, :2]
        if xy.shape != (p, 2):
            raise EvaluationError(f"prediction has shape {xy.shape}, expected ({p}, 2)")
        thresh = alpha * max(gt.bbox[2], gt.bbox[3])
        dist = np.hypot(*(xy - gt.coords).T)
        total += gt.visible
        correct += gt.visible & (dist <= thresh)
    if total.sum() == 0:
        raise EvaluationError("no visible joints in the evaluation set")
    with np.errstate(invalid="ignore", divide="ignore"):
        per_joint = np.where(total > 0, correct / np.maximum(total, 1), np.nan)
    return PckResult(per_joint, correct, total, alpha)


# ---------------------------------------------------------------- inference


def _resize_frames(frame: Tensor, size: int) -> Tensor:
    if frame.shape[-1] == size and frame.shape[-2] == size:
        return frame
    return Tensor(upsample_bilinear(frame, size, size).data)


def scaled_input_size(params: ModelParams, s: float) -> int:
    f = params.config.downsample_factor
    return max(f, int(round(s * params.config.input_size / f)) * f)


def infer_multiscale(frames: Sequence[Tensor], params: ModelParams, scales: Sequence[float] = (1.0,)) -> list[Tensor]:
    """Run at every scale, resample beliefs to the reference grid, and average."""
    if not scales:
        raise EvaluationError("scales must be non-empty")
    if any(s <= 0 for s in scales):
        raise EvaluationError(f"scales must be positive, got {list(scales)}")
    hm = params.config.heatmap_size
    acc: Optional[list[np.ndarray]] = None
    for s in scales:
        size = scaled_input_size(params, s)
        beliefs = forward_sequence([_resize_frames(f, size) for f in frames], params)
        maps = [b.data if b.shape[-1] == hm else upsample_bilinear(b, hm, hm).data for b in beliefs]
        acc = maps if acc is None else [a + m for a, m in zip(acc, maps)]
    n = len(scales)
    return [Tensor(a / a.dtype.type(n)) if n > 1 else Tensor(a) for a in acc]


def predict_sequences(params: ModelParams, sequences: Sequence[PoseSequence], scales=(1.0,),
                      window: Optional[int] = None, batch_size: int = 16) -> list[np.ndarray]:
    """Decoded ``T x P x 3`` joints per sequence.

    Frames are processed in consecutive windows of ``window`` frames (default:
    the model's training length), restarting the recurrent state per window.
    """
    cfg = params.config
    window = window or cfg.seq_len
    out: list[Optional[np.ndarray]] = [None] * len(sequences)
    by_len: dict[int, list[int]] = {}
    for i, seq in enumerate(sequences):
        by_len.setdefault(len(seq), []).append(i)
    for length, idxs in by_len.items():
        for b0 in range(0, len(idxs), batch_size):
            chunk = idxs[b0:b0 + batch_size]
            stack = np.stack([sequences[i].frames for i in chunk]).astype(params.dtype)  # N x T x C x H x W
            decoded = np.zeros((len(chunk), length, cfg.num_joints, 3))
            for w0 in range(0, length, window):
                frames = [Tensor(stack[:, t]) for t in range(w0, min(w0 + window, length))]
                for k, b in enumerate(infer_multiscale(frames, params, scales)):
                    for n in range(len(chunk)):
                        decoded[n, w0 + k] = decode_beliefs(b.data[n], cfg.downsample_factor)
            for n, i in enumerate(chunk):
                out[i] = decoded[n]
    return out


def evaluate(params: ModelParams, sequences: Sequence[PoseSequence], alpha: float = 0.2,
             scales=(1.0,), window: Optional[int] = None, joint_names: Optional[Sequence[str]] = None) -> dict:
    if not sequences:
        raise EvaluationError("evaluation set is empty")
    p_model = params.config.num_joints
    p_data = sequences[0].joints[0].num_joints
    if p_model != p_data:
        raise EvaluationError(f"checkpoint has P={p_model} joints but dataset has P={p_data}")
    preds = predict_sequences(params, sequences, scales, window)
    flat_pred = [f for seq in preds for f in seq]
    flat_gt = [j for seq in sequences for j in seq.joints]
    res = pck(flat_pred, flat_gt, alpha)
    names = list(joint_names or skeleton(p_model)[0])
    return {
        "alpha": alpha,
        "perJoint": {n: (None if np.isnan(v) else 100.0 * float(v)) for n, v in zip(names, res.per_joint)},
        "mean": 100.0 * res.mean,
        "numSequences": len(sequences),
    }


def format_report(report: dict, label: str = "model") -> str:
    names = list(report["perJoint"])
    width = max(8, max(len(n) for n in names) + 2)
    lw = max(10, len(label) + 1)
    head = f"{'Method':<{lw}}|" + "".join(f"{n:>{width}}" for n in names) + f" |{'Mean':>{width}}"
    cells = "".join(f"{'-':>{width}}" if v is None else f"{v:>{width}.2f}" for v in report["perJoint"].values())
    row = f"{label:<{lw}}|{cells} |{report['mean']:>{width}.2f}"
    rule = "-" * len(head)
    return "\n".join([f"PCK@{report['alpha']}", head, rule, row])


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=False)
