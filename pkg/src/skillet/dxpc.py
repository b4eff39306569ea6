"""DXPC binary point-cloud files.

Layout: magic ``DXPC``, version (uint32 LE, currently 1), point count
(uint32 LE), then count * 3 IEEE-754 float32 LE values (x, y, z in meters).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CorruptCloud, VersionMismatch
from .geometry import PointCloud

MAGIC = b"DXPC"
VERSION = 1
_HEADER = struct.Struct("<4sII")


def save_dxpc(cloud: PointCloud, path):
    pts = cloud.points.astype("<f4")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, pts.shape[0]))
        f.write(pts.tobytes())


def load_dxpc(path, frame="base") -> PointCloud:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise CorruptCloud(f"cloud file missing: {path}") from None
    if len(blob) < _HEADER.size:
        raise CorruptCloud(f"truncated header in {path}")
    magic, version, count = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptCloud(f"bad magic in {path}")
    if version != VERSION:
        raise VersionMismatch(f"{path}: DXPC version {version}, expected {VERSION}")
    expected = _HEADER.size + 12 * count
    if len(blob) != expected:
        raise CorruptCloud(
            f"{path}: expected {expected} bytes for {count} points, got {len(blob)}"
        )
    pts = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(count, 3)
    if count and not np.all(np.isfinite(pts)):
        raise CorruptCloud(f"{path}: non-finite point data")
    return PointCloud(pts.astype(np.float64), frame)
