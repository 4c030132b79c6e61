"""Versioned checkpoints: binary tensor records plus a JSON metadata sidecar.

``<stem>.sfck`` layout (little-endian)::

    b"SFCK" | u32 format version | u32 record count
    per record: u32 name length | name (utf-8) | u32 ndim | ndim * u32 extents | float64 data

``<stem>.json`` holds the model configuration, optimizer hyperparameters and
step count, epoch, RNG state and the training log.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, DataError
from .io import atomic_write

FORMAT_VERSION = 1
MAGIC = b"SFCK"


class CheckpointError(DataError):
    """A checkpoint file is malformed or does not match the model code."""


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    optimizer: dict = field(default_factory=dict)
    moments: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    rng_state: dict | None = None
    train_config: dict | None = None
    log: list = field(default_factory=list)

    def records(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"param/{name}", arr) for name, arr in self.params.items()]
        out += [(name, arr) for name, arr in sorted(self.moments.items())]
        return out

    def metadata(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "model_config": self.model_config.to_dict(),
            "optimizer": self.optimizer,
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "train_config": self.train_config,
            "log": self.log,
        }


def encode_records(records) -> bytes:
    buf = io.BytesIO()
    records = list(records)
    buf.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(records)))
    for name, arr in records:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        buf.write(struct.pack("<I", len(raw)) + raw)
        buf.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode_records(blob: bytes, source: str = "<bytes>") -> list[tuple[str, np.ndarray]]:
    view = memoryview(blob)
    try:
        if bytes(view[:4]) != MAGIC:
            raise CheckpointError(f"{source}: not a checkpoint (magic {bytes(view[:4])!r})")
        version, count = struct.unpack_from("<II", view, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{source}: format version {version}, expected {FORMAT_VERSION}")
        pos, out = 12, []
        for _ in range(count):
            (n,) = struct.unpack_from("<I", view, pos)
            name = bytes(view[pos + 4:pos + 4 + n]).decode("utf-8")
            pos += 4 + n
            (ndim,) = struct.unpack_from("<I", view, pos)
            shape = struct.unpack_from(f"<{ndim}I", view, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * 8
            if pos + size > len(blob):
                raise CheckpointError(f"{source}: record {name!r} truncated")
            out.append((name, np.frombuffer(blob, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy()))
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"{source}: truncated record table") from exc
    if pos != len(blob):
        raise CheckpointError(f"{source}: {len(blob) - pos} trailing bytes")
    return out


def save_checkpoint(ckpt: Checkpoint, stem) -> tuple[Path, Path]:
    stem = Path(stem)
    bin_path, meta_path = stem.with_suffix(".sfck"), stem.with_suffix(".json")
    atomic_write(bin_path, encode_records(ckpt.records()))
    atomic_write(meta_path, json.dumps(ckpt.metadata(), indent=2, sort_keys=True) + "\n")
    return bin_path, meta_path


def load_checkpoint(stem) -> Checkpoint:
    stem = Path(stem)
    if stem.suffix in (".sfck", ".json"):
        stem = stem.with_suffix("")
    bin_path, meta_path = stem.with_suffix(".sfck"), stem.with_suffix(".json")
    try:
        meta = json.loads(meta_path.read_text())
        blob = bin_path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{exc.filename}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{meta_path}: invalid JSON ({exc})") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{meta_path}: format version {meta.get('format_version')!r}, "
                              f"expected {FORMAT_VERSION}")
    try:
        config = ModelConfig.from_dict(meta["model_config"])
    except (ConfigError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{meta_path}: model config incompatible with this code ({exc})") from exc
    params, moments = {}, {}
    for name, arr in decode_records(blob, str(bin_path)):
        if name.startswith("param/"):
            params[name[len("param/"):]] = arr
        else:
            moments[name] = arr
    return Checkpoint(config, params, meta.get("optimizer", {}), moments, meta.get("epoch", 0),
                      meta.get("rng_state"), meta.get("train_config"), meta.get("log", []))


def load_into(model, ckpt: Checkpoint) -> None:
    """Copy checkpoint parameters into ``model`` after checking names and shapes."""
    expected = model.parameter_dict()
    if set(expected) != set(ckpt.params):
        missing = sorted(set(expected) - set(ckpt.params))[:3]
        extra = sorted(set(ckpt.params) - set(expected))[:3]
        raise CheckpointError(f"checkpoint parameters do not match the model (missing {missing}, extra {extra})")
    for name, param in expected.items():
        arr = ckpt.params[name]
        if arr.shape != param.shape:
            raise CheckpointError(f"parameter {name}: checkpoint shape {arr.shape}, model shape {param.shape}")
        param.data[...] = arr
