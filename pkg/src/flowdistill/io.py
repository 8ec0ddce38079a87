"""Binary artifact formats (all little-endian, float32 payloads).

TSET  trajectory set   b"TSET", version u32, K u32, H u32, D u32, K*H*D f32
EOBS  obs embedding    b"EOBS", version u32, N u32, N f32
ROBS  raw observation  b"ROBS", version u32, count u32, then per field:
                       rank u8, dims u32 x rank, f32 payload
                       (fields: appearance, geometry, point_set, proprio)
"""

from __future__ import annotations

import csv
import hashlib
import struct
from pathlib import Path

import numpy as np

from .tasks import RawObservation

VERSION = 1


class FormatError(ValueError):
    pass


def sha256_bytes(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def _check_magic(buf: bytes, magic: bytes, header: int) -> None:
    if len(buf) < header or buf[:4] != magic:
        raise FormatError(f"not a {magic.decode()} file (bad magic or short header)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported {magic.decode()} version {version}")


# -- TSET --------------------------------------------------------------------


def encode_tset(trajs: np.ndarray) -> bytes:
    trajs = np.asarray(trajs)
    if trajs.ndim != 3 or trajs.shape[0] < 1:
        raise FormatError(f"trajectory set must be (K>=1, H, D), got {trajs.shape}")
    if not np.all(np.isfinite(trajs)):
        raise FormatError("trajectory set has non-finite values")
    K, H, D = trajs.shape
    return b"TSET" + struct.pack("<IIII", VERSION, K, H, D) + np.ascontiguousarray(trajs, "<f4").tobytes()


def decode_tset(buf: bytes) -> np.ndarray:
    _check_magic(buf, b"TSET", 20)
    K, H, D = struct.unpack_from("<III", buf, 8)
    n = K * H * D
    if len(buf) != 20 + 4 * n:
        raise FormatError(f"TSET payload size mismatch: header says {n} floats, file has {(len(buf) - 20) / 4}")
    return np.frombuffer(buf, "<f4", count=n, offset=20).reshape(K, H, D).astype(np.float32)


def write_tset(path, trajs) -> str:
    blob = encode_tset(trajs)
    Path(path).write_bytes(blob)
    return sha256_bytes(blob)


def read_tset(path) -> np.ndarray:
    return decode_tset(Path(path).read_bytes())


def tset_to_csv(trajs: np.ndarray, path) -> None:
    """One row per (k, h) with columns k, h, a_0 .. a_{D-1}."""
    trajs = np.asarray(trajs)
    K, H, D = trajs.shape
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["k", "h"] + [f"a_{d}" for d in range(D)])
        for k in range(K):
            for h in range(H):
                w.writerow([k, h] + [repr(float(v)) for v in trajs[k, h]])


# -- EOBS --------------------------------------------------------------------


def encode_eobs(vec: np.ndarray) -> bytes:
    vec = np.asarray(vec).reshape(-1)
    return b"EOBS" + struct.pack("<II", VERSION, vec.size) + np.ascontiguousarray(vec, "<f4").tobytes()


def decode_eobs(buf: bytes) -> np.ndarray:
    _check_magic(buf, b"EOBS", 12)
    (n,) = struct.unpack_from("<I", buf, 8)
    if len(buf) != 12 + 4 * n:
        raise FormatError("EOBS payload size mismatch")
    return np.frombuffer(buf, "<f4", count=n, offset=12).astype(np.float32)


def write_eobs(path, vec) -> str:
    blob = encode_eobs(vec)
    Path(path).write_bytes(blob)
    return sha256_bytes(blob)


def read_eobs(path) -> np.ndarray:
    return decode_eobs(Path(path).read_bytes())


# -- ROBS --------------------------------------------------------------------

_OBS_FIELDS = ("appearance_tokens", "geometry_tokens", "point_set", "proprio")


def encode_robs(obs: RawObservation) -> bytes:
    parts = [b"ROBS", struct.pack("<II", VERSION, len(_OBS_FIELDS))]
    for name in _OBS_FIELDS:
        arr = np.asarray(getattr(obs, name))
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, "<f4").tobytes())
    return b"".join(parts)


def decode_robs(buf: bytes) -> RawObservation:
    _check_magic(buf, b"ROBS", 12)
    (count,) = struct.unpack_from("<I", buf, 8)
    if count != len(_OBS_FIELDS):
        raise FormatError(f"ROBS expects {len(_OBS_FIELDS)} fields, header says {count}")
    off, fields = 12, {}
    try:
        for name in _OBS_FIELDS:
            (rank,) = struct.unpack_from("<B", buf, off)
            dims = struct.unpack_from(f"<{rank}I", buf, off + 1)
            off += 1 + 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            if off + 4 * n > len(buf):
                raise FormatError(f"ROBS truncated in field {name}")
            fields[name] = np.frombuffer(buf, "<f4", count=n, offset=off).reshape(dims).astype(np.float64)
            off += 4 * n
    except struct.error as exc:
        raise FormatError(f"ROBS truncated: {exc}") from None
    if off != len(buf):
        raise FormatError("ROBS trailing bytes")
    return RawObservation(**fields)


def write_robs(path, obs: RawObservation) -> str:
    blob = encode_robs(obs)
    Path(path).write_bytes(blob)
    return sha256_bytes(blob)


def read_robs(path) -> RawObservation:
    return decode_robs(Path(path).read_bytes())
