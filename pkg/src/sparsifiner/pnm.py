"""Minimal portable pixmap (P6) reader and graymap (P5) writer."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PnmError(ValueError):
    pass


def _tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated header integers, skipping comments."""
    out, pos = [], 2
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise PnmError("malformed PNM header")
        out.append(int(data[start:pos]))
    return out, pos + 1


def read_ppm(path) -> np.ndarray:
    """Binary PPM -> ``uint8`` array of shape (h, w, 3)."""
    data = Path(path).read_bytes()
    if data[:2] != b"P6":
        raise PnmError(f"{path}: only binary PPM (P6) is supported")
    (w, h, maxval), start = _tokens(data, 3)
    if maxval != 255:
        raise PnmError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    pixels = data[start:start + w * h * 3]
    if len(pixels) != w * h * 3:
        raise PnmError(f"{path}: pixel data truncated")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def to_gray(values: np.ndarray) -> np.ndarray:
    """Linear min-max scaling to 0..255; a constant image maps to 0."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.round((v - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, values: np.ndarray) -> None:
    v = np.atleast_2d(values)
    gray = to_gray(v)
    h, w = gray.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + gray.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise PnmError(f"{path}: not a binary PGM")
    (w, h, _), start = _tokens(data, 3)
    return np.frombuffer(data[start:start + w * h], dtype=np.uint8).reshape(h, w).copy()
