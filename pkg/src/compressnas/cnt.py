"""CNT1 tensor container.

Layout: ``b"CNT1"``, dtype code (u8, 0 = float32), axis count (u8), one
little-endian u32 extent per axis, then the row-major little-endian float32
payload.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CNT1"
DTYPE_FLOAT32 = 0


def dumps(tensor: np.ndarray) -> bytes:
    t = np.asarray(tensor)
    if not 1 <= t.ndim <= 255:
        raise ValueError(f"cannot store a tensor with {t.ndim} axes")
    header = MAGIC + struct.pack("<BB", DTYPE_FLOAT32, t.ndim)
    header += struct.pack(f"<{t.ndim}I", *t.shape)
    return header + np.ascontiguousarray(t, dtype="<f4").tobytes()


def loads(buf: bytes) -> np.ndarray:
    """Decode a CNT1 blob into a float32 array."""
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise ValueError("not a CNT1 container (bad magic)")
    dtype, ndim = struct.unpack_from("<BB", buf, 4)
    if dtype != DTYPE_FLOAT32:
        raise ValueError(f"unsupported CNT1 dtype code {dtype}")
    off = 6 + 4 * ndim
    if len(buf) < off:
        raise ValueError("truncated CNT1 header")
    shape = struct.unpack_from(f"<{ndim}I", buf, 6)
    count = int(np.prod(shape)) if ndim else 1
    if len(buf) != off + 4 * count:
        raise ValueError(f"CNT1 payload length {len(buf) - off} does not match shape {shape}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).copy()


def save(path, tensor: np.ndarray) -> None:
    Path(path).write_bytes(dumps(tensor))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())
