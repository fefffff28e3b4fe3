"""Binary (P5) grayscale PGM read/write, 8-bit only."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class PGMError(ValueError):
    pass


def encode(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 2:
        raise PGMError(f"expected a 2-D image, got shape {img.shape}")
    if img.dtype != np.uint8:
        if img.min() < 0 or img.max() > 255:
            raise PGMError("pixel values outside 0..255")
        img = img.astype(np.uint8)
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + img.tobytes()


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    # header tokens are whitespace separated; '#' starts a comment to end of line
    toks: list[bytes] = []
    pos = 0
    while len(toks) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise PGMError("truncated header")
        if buf[pos:pos + 1] == b"#":
            end = buf.find(b"\n", pos)
            pos = len(buf) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        toks.append(buf[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    return toks, pos + 1


def decode(buf: bytes) -> np.ndarray:
    toks, pos = _tokens(buf, 4)
    if toks[0] != b"P5":
        raise PGMError(f"not a binary PGM (magic {toks[0]!r})")
    try:
        w, h, maxval = (int(t) for t in toks[1:])
    except ValueError as exc:
        raise PGMError("non-integer header field") from exc
    if maxval != 255:
        raise PGMError(f"only maxval 255 is supported, got {maxval}")
    raster = buf[pos:pos + w * h]
    if len(raster) != w * h:
        raise PGMError(f"raster has {len(raster)} bytes, expected {w * h}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()


def write(path: str | os.PathLike, img: np.ndarray) -> None:
    Path(path).write_bytes(encode(img))


def read(path: str | os.PathLike) -> np.ndarray:
    return decode(Path(path).read_bytes())
