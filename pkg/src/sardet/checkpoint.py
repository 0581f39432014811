"""Binary tensor archive shared by pretraining, fine-tuning and inference.

Layout (little-endian)::

    b"TSAR"  version:u32  count:u32
    repeated count times:
        name_len:u32  name:utf-8  rank:u32  dims:u32*rank  data:f32*prod(dims)

Training metadata (epoch, histories, config) travels in a JSON sidecar
next to the archive so the binary format stays purely numeric.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from typing import Mapping

import numpy as np

MAGIC = b"TSAR"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(IOError):
    """A checkpoint is missing, truncated or malformed."""


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(tensors))]
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(a.ndim)]
        parts += [_U32.pack(d) for d in a.shape]
        parts.append(a.tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def load_tensors(path: str | os.PathLike) -> "OrderedDict[str, np.ndarray]":
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    pos = 0
    current = "<header>"

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(
                f"{path}: truncated while reading {current!s} at byte {pos} "
                f"(needed {n} bytes, {len(buf) - pos} left)")
        out = buf[pos:pos + n]
        pos += n
        return out

    def u32() -> int:
        return _U32.unpack(take(4))[0]

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte 0, not a TSAR checkpoint")
    version = u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at byte 4")
    count = u32()
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for i in range(count):
        current = f"tensor #{i}"
        start = pos
        n = u32()
        if n > 4096:
            raise CheckpointError(f"{path}: implausible name length {n} for tensor #{i} at byte {start}")
        try:
            name = take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"{path}: tensor #{i} name is not utf-8 (byte {start + 4})") from e
        current = f"tensor {name!r}"
        rank = u32()
        if rank > 8:
            raise CheckpointError(f"{path}: tensor {name!r} has implausible rank {rank} at byte {pos - 4}")
        dims = tuple(u32() for _ in range(rank))
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(nbytes), dtype="<f4").reshape(dims).astype(np.float32)
        if name in out:
            raise CheckpointError(f"{path}: duplicate tensor {name!r} at byte {start}")
        out[name] = data
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes after {count} tensors (byte {pos})")
    return out


def meta_path(path: str | os.PathLike) -> str:
    return f"{path}.json"


def save_meta(path: str | os.PathLike, meta: dict) -> None:
    with open(meta_path(path), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_meta(path: str | os.PathLike) -> dict:
    p = meta_path(path)
    if not os.path.exists(p):
        return {}
    with open(p) as fh:
        return json.load(fh)
