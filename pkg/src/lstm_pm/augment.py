"""Sequence-consistent geometric augmentation.

One (scale, angle, flip) triple is drawn per sequence and applied to every
frame, in the order scale -> rotate -> flip -> crop. The crop is centered on
the mean of all visible joints over the sequence.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .heatmap import JointSet, bbox_from_joints
from .synth import PoseSequence


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentRanges:
    scale: tuple = (0.8, 1.4)
    rotate_deg: tuple = (-40.0, 40.0)
    flip_prob: float = 0.5
    crop_size: int = 64


@dataclass(frozen=True)
class Transform:
    scale: float
    angle_deg: float
    flip: bool
    center: tuple  # crop center in source pixels
    crop_size: int

    def matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """``(A, b)`` with ``out = A @ src + b``."""
        if self.scale <= 0:
            raise AugmentError(f"degenerate scale {self.scale}")
        th = np.deg2rad(self.angle_deg)
        rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        a = rot * self.scale
        if self.flip:
            a = np.diag([-1.0, 1.0]) @ a
        mid = (self.crop_size - 1) / 2
        b = np.array([mid, mid]) - a @ np.asarray(self.center, dtype=np.float64)
        return a, b

    def apply_points(self, xy: np.ndarray) -> np.ndarray:
        a, b = self.matrix()
        return np.asarray(xy, dtype=np.float64) @ a.T + b


def sample_transform(seed: int, ranges: AugmentRanges, center) -> Transform:
    rng = np.random.Generator(np.random.Philox(seed))
    lo, hi = ranges.scale
    if lo <= 0 or hi <= 0:
        raise AugmentError(f"degenerate scale range {ranges.scale}")
    scale = float(rng.uniform(lo, hi))
    angle = float(rng.uniform(*ranges.rotate_deg))
    flip = bool(rng.random() < ranges.flip_prob)
    return Transform(scale, angle, flip, tuple(float(c) for c in center), ranges.crop_size)


def warp_frames(frames: np.ndarray, tf: Transform) -> np.ndarray:
    """Inverse-map every output pixel and sample bilinearly, zero outside."""
    a, b = tf.matrix()
    inv = np.linalg.inv(a)
    n = tf.crop_size
    qy, qx = np.mgrid[0:n, 0:n].astype(np.float64)
    q = np.stack([qx.ravel() - b[0], qy.ravel() - b[1]])
    sx, sy = inv @ q
    h, w = frames.shape[-2:]
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    flat = frames.reshape(-1, h * w)
    out = np.zeros((flat.shape[0], n * n), dtype=np.float64)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = np.where(ok, yi * w + xi, 0)
            out += flat[:, idx] * np.where(ok, wx * wy, 0.0)
    return out.reshape(frames.shape[:-2] + (n, n)).astype(frames.dtype)


def _swap(arr: np.ndarray, pairs: Sequence[tuple]) -> np.ndarray:
    out = arr.copy()
    for l, r in pairs:
        out[..., l], out[..., r] = arr[..., r], arr[..., l]
    return out


def transform_joints(js: JointSet, tf: Transform, flip_pairs: Sequence[tuple] = ()) -> JointSet:
    coords = tf.apply_points(js.coords)
    visible = js.visible.copy()
    if tf.flip and flip_pairs:
        coords = _swap(coords.T, flip_pairs).T
        visible = _swap(visible, flip_pairs)
    n = tf.crop_size
    inb = (coords[:, 0] >= 0) & (coords[:, 0] <= n - 1) & (coords[:, 1] >= 0) & (coords[:, 1] <= n - 1)
    return JointSet(coords, visible & inb, bbox_from_joints(coords))


def visible_mean(seq: PoseSequence) -> np.ndarray:
    pts = [j.coords[j.visible] for j in seq.joints]
    pts = np.concatenate(pts) if pts else np.zeros((0, 2))
    if len(pts) == 0:
        h, w = seq.frames.shape[-2:]
        return np.array([(w - 1) / 2, (h - 1) / 2])
    return pts.mean(axis=0)


def apply_transform(seq: PoseSequence, tf: Transform, flip_pairs: Sequence[tuple] = ()) -> PoseSequence:
    frames = warp_frames(seq.frames, tf)
    joints = [transform_joints(j, tf, flip_pairs) for j in seq.joints]
    occluded = np.asarray(seq.occluded, dtype=bool)
    if tf.flip and flip_pairs:
        occluded = _swap(occluded, flip_pairs)
    return replace(seq, frames=frames, joints=joints, occluded=occluded,
                   occluders=[None] * len(frames), transforms=[tf] * len(frames))


def augment_sequence(seq: PoseSequence, seed: int, ranges: AugmentRanges = AugmentRanges(),
                     flip_pairs: Sequence[tuple] = (), center: Optional[np.ndarray] = None) -> PoseSequence:
    tf = sample_transform(seed, ranges, visible_mean(seq) if center is None else center)
    return apply_transform(seq, tf, flip_pairs)
