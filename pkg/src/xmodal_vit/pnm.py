"""Binary PPM (P6) and PGM (P5) reading and writing, 8-bit only for writing."""

from __future__ import annotations

import os
from typing import Tuple

import numpy as np


class PNMError(ValueError):
    pass


def _tokens(buf: bytes, count: int) -> Tuple[list, int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    out, pos, n = [], 0, len(buf)
    while len(out) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PNMError("truncated header")
        out.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return out, pos + 1


def decode(buf: bytes) -> Tuple[np.ndarray, int]:
    """Decode P5/P6 bytes to (uint8/uint16 array ``[H, W]`` or ``[H, W, 3]``, maxval)."""
    (magic, w, h, maxval), offset = _tokens(buf, 4)
    if magic not in (b"P5", b"P6"):
        raise PNMError(f"unsupported magic {magic!r}; only binary P5/P6")
    w, h, maxval = int(w), int(h), int(maxval)
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise PNMError(f"bad header: {w}x{h} maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    count = w * h * channels
    if len(buf) - offset < count * dtype.itemsize:
        raise PNMError(f"raster truncated: need {count * dtype.itemsize} bytes")
    raster = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return raster.reshape(shape).astype(np.uint16 if maxval > 255 else np.uint8), maxval


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Read a P6 file as float ``[H, W, 3]`` in [0, 1]."""
    with open(path, "rb") as fh:
        arr, maxval = decode(fh.read())
    if arr.ndim != 3:
        raise PNMError(f"{path}: expected a colour P6 image")
    return arr.astype(np.float64) / maxval


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read a P5 file as the raw integer array ``[H, W]``."""
    with open(path, "rb") as fh:
        arr, _ = decode(fh.read())
    if arr.ndim != 2:
        raise PNMError(f"{path}: expected a greyscale P5 image")
    return arr


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(img: np.ndarray) -> bytes:
    """Float RGB in [0, 1] (or uint8) -> P6 bytes."""
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise PNMError(f"expected [H, W, 3], got {arr.shape}")
    h, w, _ = arr.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr).tobytes()


def encode_pgm(img: np.ndarray) -> bytes:
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        raise PNMError("PGM writer expects uint8")
    if arr.ndim != 2:
        raise PNMError(f"expected [H, W], got {arr.shape}")
    h, w = arr.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr).tobytes()


def write_ppm(path: str | os.PathLike, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(img))


def write_pgm(path: str | os.PathLike, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(img))
