"""Flat little-endian parameter files.

Layout::

    b"SFDT" | version u32 | count u32 |
    count x (name_len u16 | name utf-8 | rank u8 | dims u32 x rank | f32 data)
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SFDT"
VERSION = 1


class ParamFormatError(ValueError):
    pass


class ParamTruncatedError(ParamFormatError):
    pass


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if arr.ndim > 255 or len(raw) > 0xFFFF:
            raise ParamFormatError(f"cannot encode tensor {name!r}")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ParamTruncatedError(f"parameter file truncated at byte {pos} (wanted {n} more)")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise ParamFormatError("bad magic: not an SFDT parameter file")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ParamFormatError(f"unsupported SFDT version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
        out[name] = data
    if pos != len(buf):
        raise ParamFormatError(f"{len(buf) - pos} trailing bytes after last tensor")
    return out


def write_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())
