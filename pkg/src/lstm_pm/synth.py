"""Synthetic stick-figure videos and JSON-lines manifests.

Randomness comes from numpy's Philox4x64 counter-based generator keyed by
the integer seed, so a ``(seed, SynthConfig, T)`` triple always renders the
same pixels and annotations.

Skeleton (7 joints): head, left hand, right hand, left foot, right foot,
hip, chest. Each joint is drawn as a disc of a unique color on top of
light-gray limbs, so joint positions can be recovered from pixels alone.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image

from .config import SynthConfig
from .heatmap import JointSet, bbox_from_joints
from .tensor import Tensor


class SynthError(ValueError):
    pass


class ManifestError(ValueError):
    pass


JOINT_NAMES = ("head", "lhand", "rhand", "lfoot", "rfoot", "hip", "chest")
LIMBS = ((0, 6), (6, 1), (6, 2), (6, 5), (5, 3), (5, 4))
FLIP_PAIRS = ((1, 2), (3, 4))
JOINT_COLORS = np.array([
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
])
LIMB_COLOR = np.array([0.85, 0.85, 0.85])
BACKGROUND_COLOR = np.array([0.15, 0.15, 0.15])
OCCLUDER_COLOR = np.array([0.45, 0.45, 0.45])

# joint offsets in units of figure height, y pointing down, origin at the torso center
_TEMPLATE = np.array([
    [0.0, -0.50],
    [-0.28, -0.05],
    [0.28, -0.05],
    [-0.14, 0.45],
    [0.14, 0.45],
    [0.0, 0.08],
    [0.0, -0.28],
])

# paper-profile data uses the 13-joint Penn layout; only names and flip pairs are needed
PENN_JOINT_NAMES = ("head", "lsho", "rsho", "lelb", "relb", "lwri", "rwri",
                    "lhip", "rhip", "lknee", "rknee", "lank", "rank")
PENN_FLIP_PAIRS = ((1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12))


def skeleton(num_joints: int) -> tuple[tuple, tuple]:
    """Joint names and left/right swap pairs for a supported joint count."""
    if num_joints == len(JOINT_NAMES):
        return JOINT_NAMES, FLIP_PAIRS
    if num_joints == len(PENN_JOINT_NAMES):
        return PENN_JOINT_NAMES, PENN_FLIP_PAIRS
    return tuple(f"j{i}" for i in range(num_joints)), ()


@dataclass
class PoseSequence:
    frames: np.ndarray  # T x C x H x W, values in [0, 1]
    joints: list[JointSet]
    occluded: np.ndarray  # T x P bools
    seq_id: str = ""
    seed: Optional[int] = None
    occluders: list = field(default_factory=list)  # per frame: (x0, y0, x1, y1) or None
    transforms: list = field(default_factory=list)  # per frame augmentation record, if any

    def __post_init__(self):
        if len(self.frames) != len(self.joints):
            raise SynthError(f"{len(self.frames)} frames but {len(self.joints)} annotations")

    def __len__(self) -> int:
        return len(self.frames)

    def frame_tensors(self) -> list[Tensor]:
        return [Tensor(f) for f in self.frames]


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


# ---------------------------------------------------------------- rendering


def _segment_distance(px, py, a, b):
    d = b - a
    denom = float(d @ d)
    if denom == 0:
        return np.hypot(px - a[0], py - a[1])
    t = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / denom, 0, 1)
    return np.hypot(px - (a[0] + t * d[0]), py - (a[1] + t * d[1]))


def _blend(img, alpha, color):
    img *= 1 - alpha[None]
    img += alpha[None] * color[:, None, None]


def make_background(cfg: SynthConfig, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    n = cfg.image_size
    img = np.empty((3, n, n))
    img[:] = BACKGROUND_COLOR[:, None, None]
    if cfg.background == "noise":
        if rng is None:
            raise SynthError("noise background needs a random generator")
        img += rng.uniform(-0.1, 0.1, size=(3, n, n))
    return img


def render_pose(pose: JointSet, cfg: SynthConfig, background: Optional[np.ndarray] = None) -> np.ndarray:
    """Rasterize limbs then joint discs with one-pixel anti-aliased edges."""
    n = cfg.image_size
    img = (make_background(cfg) if background is None else background).astype(np.float64, copy=True)
    py, px = np.mgrid[0:n, 0:n].astype(np.float64)
    xy = pose.coords
    for a, b in LIMBS:
        if a < len(xy) and b < len(xy):
            d = _segment_distance(px, py, xy[a], xy[b])
            _blend(img, np.clip(cfg.limb_width / 2 + 0.5 - d, 0, 1), LIMB_COLOR)
    for j in range(len(xy)):
        if pose.visible[j]:
            d = np.hypot(px - xy[j, 0], py - xy[j, 1])
            _blend(img, np.clip(cfg.joint_radius + 0.5 - d, 0, 1), JOINT_COLORS[j % len(JOINT_COLORS)])
    return np.clip(img, 0, 1)


def occluder_rect(coords: np.ndarray, limb: tuple, cfg: SynthConfig) -> tuple:
    pad = cfg.joint_radius + 1.5
    pts = coords[list(limb)]
    lo, hi = pts.min(axis=0) - pad, pts.max(axis=0) + pad
    return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])


def _draw_rect(img: np.ndarray, rect: tuple) -> None:
    n = img.shape[-1]
    x0, y0, x1, y1 = rect
    c0, c1 = max(int(np.ceil(x0)), 0), min(int(np.floor(x1)), n - 1)
    r0, r1 = max(int(np.ceil(y0)), 0), min(int(np.floor(y1)), n - 1)
    if c0 <= c1 and r0 <= r1:
        img[:, r0:r1 + 1, c0:c1 + 1] = OCCLUDER_COLOR[:, None, None]


def inside_rect(coords: np.ndarray, rect: tuple) -> np.ndarray:
    x0, y0, x1, y1 = rect
    return (coords[:, 0] >= x0) & (coords[:, 0] <= x1) & (coords[:, 1] >= y0) & (coords[:, 1] <= y1)


# ---------------------------------------------------------------- generation


def _margin(cfg: SynthConfig) -> float:
    return 2.0 + cfg.joint_radius


def generate_sequence(seed: int, cfg: SynthConfig, T: int) -> PoseSequence:
    if T < 1:
        raise SynthError(f"sequence length must be >= 1, got {T}")
    cfg.validate()
    n = cfg.image_size
    lo, hi = _margin(cfg), n - 1 - _margin(cfg)
    if cfg.figure_height * 1.15 > hi - lo:
        raise SynthError(f"figure height {cfg.figure_height} does not fit in a {n}px frame")
    rng = _rng(seed)

    size = cfg.figure_height * rng.uniform(0.85, 1.1)
    shape = _TEMPLATE + rng.normal(0, 0.05, size=_TEMPLATE.shape)
    center = np.full(2, (n - 1) / 2) + rng.uniform(-cfg.center_jitter, cfg.center_jitter, size=2)
    anchor = shape * size
    pos = np.clip(center + anchor, lo, hi)
    vr = cfg.velocity_range
    drift = rng.uniform(-vr / 2, vr / 2, size=2)
    vel = rng.uniform(-vr, vr, size=pos.shape)
    background = make_background(cfg, rng)

    positions = [pos.copy()]
    for _ in range(T - 1):
        center = center + drift
        vel = np.clip(0.8 * vel + rng.normal(0, 0.3, size=vel.shape) * vr
                      + 0.1 * (center + anchor - pos), -vr, vr)
        nxt = pos + vel
        out = (nxt < lo) | (nxt > hi)
        vel[out] = -vel[out]
        pos = np.clip(pos + vel, lo, hi)
        bounce = (center + anchor < lo) | (center + anchor > hi)
        drift = np.where(bounce.any(axis=0), -drift, drift)
        positions.append(pos.copy())

    occluders: list = [None] * T
    if rng.random() < cfg.occlusion_prob:
        d_lo, d_hi = cfg.occlusion_duration
        dur = min(int(rng.integers(d_lo, d_hi + 1)), T)
        start = int(rng.integers(min(1, T - dur), T - dur + 1))
        limb = LIMBS[int(rng.integers(len(LIMBS)))]
        for t in range(start, start + dur):
            occluders[t] = occluder_rect(positions[t], limb, cfg)

    frames, joints, occluded = [], [], []
    prev = positions[0]
    for t, p in enumerate(positions):
        visible = np.ones(len(p), dtype=bool)
        if cfg.motion_blur and t > 0:
            img = np.mean([render_pose(JointSet(prev + (p - prev) * s, visible), cfg, background)
                           for s in (1 / 3, 2 / 3, 1.0)], axis=0)
        else:
            img = render_pose(JointSet(p, visible), cfg, background)
        occ = np.zeros(len(p), dtype=bool)
        if occluders[t] is not None:
            _draw_rect(img, occluders[t])
            occ = inside_rect(p, occluders[t])
        frames.append(img.astype(np.float32))
        joints.append(JointSet(p.copy(), visible, bbox_from_joints(p)))
        occluded.append(occ)
        prev = p
    return PoseSequence(np.stack(frames), joints, np.array(occluded), f"synth-{seed}", seed, occluders)


def generate_dataset(seed: int, count: int, cfg: SynthConfig, T: int) -> list[PoseSequence]:
    """``count`` sequences with per-sequence seeds ``seed * 1_000_003 + k``."""
    return [generate_sequence(seed * 1_000_003 + k, cfg, T) for k in range(count)]


# ---------------------------------------------------------------- manifests


def _to_png(img: np.ndarray, path: Path) -> None:
    arr = np.round(np.clip(img.transpose(1, 2, 0), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)


def export_manifest(sequences, out_dir, name: str = "manifest.jsonl") -> Path:
    """Write frames as PNG plus one JSON line per sequence; paths are relative."""
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    lines = []
    for seq in sequences:
        sdir = out_dir / "frames" / seq.seq_id
        sdir.mkdir(parents=True, exist_ok=True)
        paths = []
        for t, img in enumerate(seq.frames):
            rel = Path("frames") / seq.seq_id / f"{t:04d}.png"
            _to_png(img, out_dir / rel)
            paths.append(rel.as_posix())
        lines.append(json.dumps({
            "id": seq.seq_id,
            "frames": paths,
            "joints": [j.coords.tolist() for j in seq.joints],
            "visible": [j.visible.tolist() for j in seq.joints],
            "bbox": [j.bbox.tolist() for j in seq.joints],
        }))
    path = out_dir / name
    path.write_text("".join(line + "\n" for line in lines))
    return path


def _letterbox(img: Image.Image, size: int) -> tuple[np.ndarray, float, float, float, float]:
    w, h = img.size
    s = size / max(w, h)
    nw, nh = max(1, round(w * s)), max(1, round(h * s))
    ox, oy = (size - nw) // 2, (size - nh) // 2
    canvas = np.zeros((3, size, size), dtype=np.float32)
    if (nw, nh) != (w, h):
        img = img.resize((nw, nh), Image.BILINEAR)
    canvas[:, oy:oy + nh, ox:ox + nw] = np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0
    return canvas, nw / w, nh / h, ox, oy


def load_annotated_dataset(manifest_path, image_size: int, num_joints: int) -> Iterator[PoseSequence]:
    """Stream sequences from a JSON-lines manifest, letterboxed to ``image_size``."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ManifestError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    with open(manifest_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            yield _parse_record(line, lineno, root, image_size, num_joints, manifest_path)


def _parse_record(line, lineno, root, image_size, num_joints, source) -> PoseSequence:
    where = f"{source} line {lineno}"
    try:
        rec = json.loads(line)
        seq_id = str(rec["id"])
        paths, joints, visible, bboxes = rec["frames"], rec["joints"], rec["visible"], rec["bbox"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ManifestError(f"{where}: malformed record ({exc})") from None
    if not (len(paths) == len(joints) == len(visible) == len(bboxes)) or not paths:
        raise ManifestError(f"{where}: frames/joints/visible/bbox lengths differ or are empty")
    frames, sets = [], []
    for t, (p, xy, vis, bb) in enumerate(zip(paths, joints, visible, bboxes)):
        xy = np.asarray(xy, dtype=np.float64)
        if xy.shape != (num_joints, 2) or len(vis) != num_joints:
            raise ManifestError(f"{where}: frame {t} has {len(xy)} joints, config expects {num_joints}")
        if len(bb) != 4:
            raise ManifestError(f"{where}: frame {t} bbox must have 4 numbers")
        path = root / p
        try:
            with Image.open(path) as im:
                img, sx, sy, ox, oy = _letterbox(im.convert("RGB"), image_size)
        except OSError as exc:
            raise ManifestError(f"{where}: cannot read frame {path} ({exc})") from None
        coords = xy * [sx, sy] + [ox, oy]
        x, y, w, h = (float(v) for v in bb)
        sets.append(JointSet(coords, np.asarray(vis, dtype=bool), [x * sx + ox, y * sy + oy, w * sx, h * sy]))
        frames.append(img)
    return PoseSequence(np.stack(frames), sets, np.zeros((len(sets), num_joints), dtype=bool), seq_id)
