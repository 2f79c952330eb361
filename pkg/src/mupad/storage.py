"""Dependency-free binary containers: named float64 blobs with shape headers.

One format serves both per-sample tensor files and checkpoints. All
integers little-endian; arrays are row-major float64. Save -> load -> save
round trips byte-identically because keys are written in sorted order.

Layout: magic(5) | u32 blob count | blobs, each:
  u16 name length | name utf-8 | u8 ndim | u64 dims... | f64 data
Checkpoints prepend: u32 config length | config text | u64 step.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

SAMPLE_MAGIC = b"MUPS1"
CHECKPOINT_MAGIC = b"MUPD1"


class StorageError(ValueError):
    pass


def _pack_blobs(arrays: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise StorageError("truncated file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u(self, fmt: str) -> int:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def _unpack_blobs(r: _Reader) -> dict[str, np.ndarray]:
    count = r.u("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u("<H")).decode()
        ndim = r.u("<B")
        shape = tuple(r.u("<Q") for _ in range(ndim))
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape)
        arrays[name] = data.copy()
    return arrays


def write_blob_file(path, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(SAMPLE_MAGIC + _pack_blobs(arrays))


def read_blob_file(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:5] != SAMPLE_MAGIC:
        raise StorageError(f"bad magic in {path}")
    r = _Reader(buf)
    r.take(5)
    arrays = _unpack_blobs(r)
    if r.pos != len(buf):
        raise StorageError(f"trailing bytes in {path}")
    return arrays


def write_checkpoint(path, config_text: str, step: int,
                     arrays: dict[str, np.ndarray]) -> None:
    cfg = config_text.encode()
    head = CHECKPOINT_MAGIC + struct.pack("<I", len(cfg)) + cfg + struct.pack("<Q", step)
    Path(path).write_bytes(head + _pack_blobs(arrays))


def read_checkpoint(path):
    buf = Path(path).read_bytes()
    if buf[:5] != CHECKPOINT_MAGIC:
        raise StorageError(f"bad checkpoint magic in {path}")
    r = _Reader(buf)
    r.take(5)
    config_text = r.take(r.u("<I")).decode()
    step = r.u("<Q")
    arrays = _unpack_blobs(r)
    if r.pos != len(buf):
        raise StorageError(f"trailing bytes in {path}")
    return config_text, step, arrays


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
