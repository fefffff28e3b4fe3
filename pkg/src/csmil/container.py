"""Binary tensor container (``.csml``) used for checkpoints and feature caches.

Layout, all integers little-endian::

    b"CSML" | version u16 | entry count u16
    per entry: name length u16 | name (utf-8) | rank u8 | dims u32 * rank
               | payload f64 * prod(dims), row-major

Non-numeric metadata is stored as a rank-1 entry whose values are the utf-8
bytes of a JSON document (see :func:`encode_json` / :func:`decode_json`).
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CSML"
VERSION = 1


class ContainerError(ValueError):
    """Malformed container; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    if len(tensors) > 0xFFFF:
        raise ValueError("too many entries for a container")
    parts = [MAGIC, struct.pack("<HH", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"entry {name!r} does not fit the container header")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes(order="C"))
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ContainerError(f"truncated {what}", pos)
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise ContainerError("bad magic, not a CSML container", 0)
    version, count = struct.unpack("<HH", take(4, "header"))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}", 4)

    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = pos
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(name_len, "name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerError("entry name is not utf-8", start + 2) from exc
        if name in out:
            raise ContainerError(f"duplicate entry {name!r}", start)
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(8 * n, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    if pos != len(view):
        raise ContainerError("trailing bytes after last entry", pos)
    return out


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def encode_json(obj) -> np.ndarray:
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float64)


def decode_json(arr: np.ndarray):
    return json.loads(np.asarray(arr, dtype=np.uint8).tobytes().decode("utf-8"))
