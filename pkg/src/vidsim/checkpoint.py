"""Model checkpoint persistence.

Layout (little-endian):

    magic "VCKPT1" | u32 version=1
    | u32 config_len | config UTF-8 (key=value lines, self-describing)
    | u32 param_count
    | per param: u32 name_len | name UTF-8 | u32 rank | u32 dims... |
      raw float32 values

Values are stored at 32 bits; a write -> read -> write cycle is
byte-identical.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .store import (
    BadMagicError,
    TruncatedFileError,
    UnsupportedVersionError,
    _atomic_write,
    _Reader,
)
from .tensor import Parameter

__all__ = ["save_checkpoint", "load_checkpoint", "CHECKPOINT_MAGIC"]

CHECKPOINT_MAGIC = b"VCKPT1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: list[Parameter], config_text: str = "") -> None:
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ValueError("parameter names must be unique within a checkpoint")
    cfg = config_text.encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<I", len(cfg)),
        cfg,
        struct.pack("<I", len(params)),
    ]
    for p in params:
        name = p.name.encode("utf-8")
        data = np.ascontiguousarray(p.tensor.data, dtype="<f4")
        parts.append(struct.pack("<I", len(name)))
        parts.append(name)
        parts.append(struct.pack("<I", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    _atomic_write(path, b"".join(parts))


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    """Return (config_text, name -> float64 array) in file order."""
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    magic = r.take(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"expected {CHECKPOINT_MAGIC!r}, found {magic!r}")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}")
    config_text = r.take(r.u32()).decode("utf-8")
    count = r.u32()
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        raw = r.take(4 * n)
        params[name] = (
            np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims)
        )
    if r.pos != len(blob):
        raise TruncatedFileError(
            f"{len(blob) - r.pos} trailing bytes after the last parameter"
        )
    return config_text, params
