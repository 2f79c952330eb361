"""8-bit binary PPM (P6) image I/O; byte-exact and dependency-free."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PpmError(ValueError):
    pass


def write_ppm(path, img: np.ndarray) -> None:
    """Write a [3,H,W] float image in [0,1] as binary PPM."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise PpmError(f"expected [3,H,W] image, got {img.shape}")
    _, h, w = img.shape
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    body = data.transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + body)


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into a [3,H,W] float image in [0,1]."""
    buf = Path(path).read_bytes()
    if not buf.startswith(b"P6"):
        raise PpmError(f"{path} is not a binary PPM")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        fields.append(buf[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise PpmError("only 8-bit PPM supported")
    body = buf[pos:pos + 3 * w * h]
    if len(body) != 3 * w * h:
        raise PpmError(f"truncated PPM body in {path}")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0
