"""Binary PPM (P6) and PGM (P5) read/write for 8-bit images."""
from pathlib import Path

import numpy as np


def to_uint8(a) -> np.ndarray:
    return np.clip(np.rint(np.asarray(a, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, rgb) -> None:
    """``rgb``: (3, H, W) or (1, 3, H, W) floats in [0, 1]."""
    a = np.asarray(rgb)
    if a.ndim == 4:
        a = a[0]
    if a.shape[0] != 3:
        raise ValueError(f"expected 3 channels, got shape {a.shape}")
    data = to_uint8(a).transpose(1, 2, 0)
    h, w = data.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + data.tobytes())


def write_pgm(path, gray) -> None:
    """``gray``: (H, W) floats in [0, 1]."""
    data = to_uint8(gray)
    h, w = data.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1
    magic, w, h, _ = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    ch = {b"P6": 3, b"P5": 1}[magic]
    data = np.frombuffer(raw, dtype=np.uint8, offset=pos, count=w * h * ch)
    return data.reshape(h, w, ch) if ch == 3 else data.reshape(h, w)
