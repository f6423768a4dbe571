"""Joint annotations <-> belief-map targets, plus the center map.

Image coordinates use the pixel-index convention (pixel ``i`` is centered at
``i``). Heatmap cell ``u`` covers image pixels ``[u*f, (u+1)*f)`` and is
centered at ``u*f + f/2``; encode and decode both follow that mapping, so a
round trip moves a joint by at most ``f/2`` per axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class JointSet:
    coords: np.ndarray  # P x 2, (x, y) in image pixels
    visible: np.ndarray  # P bools
    bbox: np.ndarray = field(default=None)  # (x, y, w, h)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        if self.visible.shape[0] != self.coords.shape[0]:
            raise ValueError(f"JointSet: {self.coords.shape[0]} coords but {self.visible.shape[0]} flags")
        if self.bbox is None:
            self.bbox = bbox_from_joints(self.coords, self.visible)
        self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(4)

    @property
    def num_joints(self) -> int:
        return self.coords.shape[0]

    def copy(self) -> "JointSet":
        return JointSet(self.coords.copy(), self.visible.copy(), self.bbox.copy())


def bbox_from_joints(coords: np.ndarray, visible=None, pad: float = 0.1) -> np.ndarray:
    """Tight box over the joints, grown by ``pad`` of its size on every side."""
    pts = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    if visible is not None and np.any(visible):
        pts = pts[np.asarray(visible, dtype=bool)]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    size = np.maximum(hi - lo, 1.0)
    lo = lo - pad * size
    size = size * (1 + 2 * pad)
    return np.array([lo[0], lo[1], size[0], size[1]])


def to_heatmap_coords(xy, factor: int) -> np.ndarray:
    return np.asarray(xy, dtype=np.float64) / factor - 0.5


def to_image_coords(uv, factor: int) -> np.ndarray:
    return np.asarray(uv, dtype=np.float64) * factor + 0.5 * factor


def gaussian_map(size: int, cx: float, cy: float, sigma: float) -> np.ndarray:
    u = np.arange(size, dtype=np.float64)
    gx = np.exp(-((u - cx) ** 2) / (2 * sigma * sigma))
    gy = np.exp(-((u - cy) ** 2) / (2 * sigma * sigma))
    return gy[:, None] * gx[None, :]


def encode_labels(joints: JointSet, heatmap_size: int, downsample_factor: int,
                  label_sigma: float, dtype=np.float32) -> Tensor:
    if label_sigma <= 0:
        raise ValueError(f"label_sigma must be positive, got {label_sigma}")
    p = joints.num_joints
    maps = np.zeros((p + 1, heatmap_size, heatmap_size), dtype=np.float64)
    uv = to_heatmap_coords(joints.coords, downsample_factor)
    for j in range(p):
        if joints.visible[j]:
            maps[j] = gaussian_map(heatmap_size, uv[j, 0], uv[j, 1], label_sigma)
    maps[p] = np.maximum(0.0, 1.0 - maps[:p].max(axis=0)) if p else 1.0
    return Tensor(maps.astype(dtype))


def decode_beliefs(beliefs, downsample_factor: int) -> np.ndarray:
    """Per joint channel: argmax location in image pixels plus its value.

    Returns a ``P x 3`` array of ``(x, y, confidence)``; the background
    channel is dropped.
    """
    b = beliefs.data if isinstance(beliefs, Tensor) else np.asarray(beliefs)
    joints = b[:-1]
    p, h, w = joints.shape
    flat = joints.reshape(p, -1)
    idx = np.argmax(flat, axis=1)
    conf = flat[np.arange(p), idx]
    v, u = np.divmod(idx, w)
    xy = to_image_coords(np.stack([u, v], axis=1), downsample_factor)
    return np.column_stack([xy, conf.astype(np.float64)])


def make_center_map(heatmap_size: int, center_sigma: float, dtype=np.float32) -> Tensor:
    if center_sigma <= 0:
        raise ValueError(f"center_sigma must be positive, got {center_sigma}")
    c = (heatmap_size - 1) / 2
    return Tensor(gaussian_map(heatmap_size, c, c, center_sigma)[None].astype(dtype))
