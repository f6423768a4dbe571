"""The ``LPM1`` tensor container.

Layout: ``b"LPM1"``, a little-endian uint32 header length, a UTF-8 JSON
header, then each tensor's float32 little-endian payload in header order.
The header always carries ``formatVersion`` and an ordered ``tensors`` list
of ``{"name", "shape"}``; callers add their own keys (model config, iteration).
"""
from __future__ import annotations

import json
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"LPM1"
FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def encode(tensors: Mapping[str, np.ndarray], header: dict | None = None) -> bytes:
    head = {"formatVersion": FORMAT_VERSION, **(header or {})}
    head["tensors"] = [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()]
    blob = json.dumps(head, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(blob)), blob]
    parts.extend(np.ascontiguousarray(v, dtype=_LE_F32).tobytes() for v in tensors.values())
    return b"".join(parts)


def decode(buf: bytes, source: str = "<bytes>") -> tuple[dict, dict]:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 8:
        raise CheckpointError(f"{source}: truncated header")
    (n,) = struct.unpack("<I", buf[4:8])
    try:
        header = json.loads(buf[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: malformed header ({exc})") from None
    if header.get("formatVersion") != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {header.get('formatVersion')!r}")
    offset = 8 + n
    tensors = {}
    for entry in header.get("tensors", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * count
        if end > len(buf):
            raise CheckpointError(f"{source}: payload truncated at tensor {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(buf, dtype=_LE_F32, count=count, offset=offset).reshape(shape).astype(np.float32)
        offset = end
    if offset != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - offset} trailing bytes")
    return header, tensors


def write(path, tensors: Mapping[str, np.ndarray], header: dict | None = None) -> None:
    data = encode(tensors, header)
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc.strerror}") from exc


def read(path) -> tuple[dict, dict]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return decode(data, str(path))
