"""NTC1 named-tensor container.

Layout (all integers little-endian)::

    b"NTC1" | version u32 | count u32
    count x { name_len u16 | name utf-8 | flags u8 (bit0 = frozen) | rank u8
              | dims u32[rank] | payload float32 }
    trailing UTF-8 JSON blob (config, normaliser, validation score, ...)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"NTC1"
VERSION = 1
FLAG_FROZEN = 1


class CheckpointError(ValueError):
    """Unreadable or inconsistent NTC1 file."""


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class NamedTensor:
    name: str
    value: np.ndarray
    frozen: bool = False


def encode(tensors: list[NamedTensor], meta: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for t in tensors:
        name = t.name.encode("utf-8")
        arr = np.ascontiguousarray(t.value, dtype="<f4")
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(struct.pack("<BB", FLAG_FROZEN if t.frozen else 0, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    parts.append(json.dumps(meta, sort_keys=True).encode("utf-8"))
    return b"".join(parts)


def decode(raw: bytes) -> tuple[list[NamedTensor], dict]:
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    try:
        version, count = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise CheckpointVersionError(f"unsupported NTC1 version {version} (expected {VERSION})")
        off = 12
        tensors = []
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + n].decode("utf-8")
            if len(name.encode("utf-8")) != n:
                raise CheckpointError("truncated tensor name")
            off += n
            flags, rank = struct.unpack_from("<BB", raw, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if off + 4 * size > len(raw):
                raise CheckpointError(f"payload of '{name}' is truncated")
            value = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(dims)
            off += 4 * size
            tensors.append(NamedTensor(name, value.astype(np.float32), bool(flags & FLAG_FROZEN)))
        meta = json.loads(raw[off:].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from None
    return tensors, meta


def write(path, tensors: list[NamedTensor], meta: dict) -> None:
    Path(path).write_bytes(encode(tensors, meta))


def read(path) -> tuple[list[NamedTensor], dict]:
    return decode(Path(path).read_bytes())
