"""MMST checkpoint container.

Layout (all integers unsigned 32-bit little-endian)::

    b"MMST" | version | config length | config UTF-8 (key=value lines)
    then, until end of file, per tensor:
    name length | name bytes | rank | dims... | float64 LE data
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MMST"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    params: dict = field(default_factory=dict)    # name -> float64 ndarray

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint) or self.config_text != other.config_text:
            return False
        if list(self.params) != list(other.params):
            return False
        return all(self.params[k].shape == other.params[k].shape
                   and self.params[k].tobytes() == other.params[k].tobytes() for k in self.params)


def to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION)]
    blob = ckpt.config_text.encode("utf-8")
    parts += [_U32.pack(len(blob)), blob]
    for name, value in ckpt.params.items():
        arr = np.asarray(value, dtype="<f8")          # tobytes() emits C order
        raw_name = name.encode("utf-8")
        parts += [_U32.pack(len(raw_name)), raw_name, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(arr.tobytes())
    return b"".join(parts)


def from_bytes(raw: bytes) -> Checkpoint:
    view = memoryview(raw)
    pos = 0

    def u32() -> int:
        nonlocal pos
        if pos + 4 > len(view):
            raise CheckpointError("truncated checkpoint")
        (value,) = _U32.unpack_from(view, pos)
        pos += 4
        return value

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = bytes(view[pos:pos + n])
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError("not an MMST checkpoint (bad magic)")
    version = u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    config_text = take(u32()).decode("utf-8")
    params = {}
    while pos < len(view):
        name = take(u32()).decode("utf-8")
        if name in params:
            raise CheckpointError(f"duplicate parameter {name!r}")
        dims = tuple(u32() for _ in range(u32()))
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64)
        params[name] = data.reshape(dims)
    return Checkpoint(config_text, params)


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
