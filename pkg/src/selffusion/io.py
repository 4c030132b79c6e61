"""Point-cloud files and atomic writes.

Binary layout (all little-endian)::

    offset 0   4 bytes   magic b"PCF1"
    offset 4   u32       point count N
    offset 8   u32       reserved, written as 0
    offset 12  u32       reserved, written as 0
    offset 16  N*3 f32   x, y, z per point
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"PCF1"
HEADER = struct.Struct("<4sIII")


def atomic_write(path, data: bytes | str) -> None:
    """Write to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_pcf(points: np.ndarray) -> bytes:
    pts = np.asarray(points)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DataError(f"expected (N, 3) points, got {pts.shape}")
    return HEADER.pack(MAGIC, pts.shape[0], 0, 0) + pts.astype("<f4").tobytes()


def decode_pcf(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < HEADER.size:
        raise DataError(f"{source}: truncated header ({len(blob)} bytes)")
    magic, n, _, _ = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DataError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    expected = HEADER.size + 12 * n
    if len(blob) != expected:
        raise DataError(f"{source}: expected {expected} bytes for {n} points, found {len(blob)}")
    return np.frombuffer(blob, dtype="<f4", offset=HEADER.size).reshape(n, 3).astype(np.float64)


def write_pcf(path, points: np.ndarray) -> None:
    atomic_write(path, encode_pcf(points))


def read_pcf(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from exc
    return decode_pcf(blob, str(path))


def read_xyz(path) -> np.ndarray:
    """ASCII ``x y z`` per line; blank lines and ``#`` comments are skipped."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from exc
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 coordinates, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: no points")
    return np.asarray(rows, dtype=np.float64)


def write_xyz(path, points: np.ndarray) -> None:
    lines = [" ".join(repr(float(v)) for v in row) for row in np.asarray(points)]
    atomic_write(path, "\n".join(lines) + "\n")


def read_points(path) -> np.ndarray:
    """Dispatch on content: PCF1 magic means binary, anything else is ASCII."""
    path = Path(path)
    try:
        with path.open("rb") as fh:
            head = fh.read(4)
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from exc
    return read_pcf(path) if head == MAGIC else read_xyz(path)


def write_points_csv(path, points: np.ndarray) -> None:
    lines = ["x,y,z"] + [",".join(repr(float(v)) for v in row) for row in np.asarray(points)]
    atomic_write(path, "\n".join(lines) + "\n")
