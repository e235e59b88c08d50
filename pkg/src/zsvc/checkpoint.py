"""SVCK tensor archive: named float32 tensors in a fixed binary layout."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict

import numpy as np

from .errors import FormatError, ValidationError

SVCK_MAGIC = b"SVCK"
SVCK_VERSION = 1


def save_tensors(tensors: Dict[str, np.ndarray], path) -> None:
    """Write tensors in insertion order."""
    parts = [SVCK_MAGIC, struct.pack("<II", SVCK_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f4"))
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValidationError(f"tensor {name!r} cannot be stored")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path) -> Dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != SVCK_MAGIC:
        raise FormatError("bad SVCK magic", offset=0)
    version, count = struct.unpack_from("<II", data, 4)
    if version != SVCK_VERSION:
        raise FormatError(f"unsupported SVCK version {version}", offset=4)
    pos = 12
    out: Dict[str, np.ndarray] = {}
    name = None
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode("utf-8")
            if len(name.encode("utf-8")) != n:
                raise FormatError("tensor name truncated", offset=pos, name=name)
            pos += n
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + size > len(data):
                raise FormatError("tensor payload truncated", offset=pos, name=name)
            out[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).reshape(shape).copy()
            pos += size
    except struct.error:
        raise FormatError("checkpoint truncated", offset=pos, name=name) from None
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes", offset=pos)
    return out


def encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.float32).astype(np.uint8).tolist()).decode("utf-8")


def encode_int(value: int, chunks: int = 4) -> np.ndarray:
    """Non-negative integer as 16-bit chunks, each exact in float32."""
    if value < 0 or value >= 1 << (16 * chunks):
        raise ValidationError(f"integer {value} out of storable range")
    return np.array([(value >> (16 * i)) & 0xFFFF for i in range(chunks)], dtype=np.float32)


def decode_int(arr: np.ndarray) -> int:
    return sum(int(v) << (16 * i) for i, v in enumerate(np.asarray(arr).reshape(-1)))
