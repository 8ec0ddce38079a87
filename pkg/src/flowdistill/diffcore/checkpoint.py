"""FDCK checkpoint files.

Layout (little-endian): ``b"FDCK"``, version u32, count u32, then per
parameter: name length u16, UTF-8 name, rank u8, dims u32 x rank, f32 payload.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"FDCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(params: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, arr in params.items():
        arr = np.asarray(getattr(arr, "data", arr))
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointError("not an FDCK checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported FDCK version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if off + 4 * size > len(buf):
                raise CheckpointError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
            off += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if off != len(buf):
        raise CheckpointError(f"checkpoint length mismatch: parsed {off} of {len(buf)} bytes")
    return out


def save_checkpoint(path, params: Mapping[str, np.ndarray]) -> str:
    """Write ``params`` and return the sha256 of the file contents."""
    blob = encode_checkpoint(params)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())
