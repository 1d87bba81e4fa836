"""Binary tensor container shared by checkpoints, datasets and attack dumps.

Layout (all integers little-endian)::

    b"PSD1" | version:u32 | count:u32
    per tensor: name_len:u32 | name:utf-8 | rank:u32 | dims:u64*rank | dtype:u8 | payload
    checksum:u64   (first 8 bytes of BLAKE2b over everything before it)

dtype tags: 0=f32, 1=f64, 2=u64, 3=u8.
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PSD1"
VERSION = 1

_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u8"), 3: np.dtype("u1")}
_TAG_OF = {np.dtype(v).str: k for k, v in _TAGS.items()}


class CheckpointFormatError(ValueError):
    """The file is not a valid tensor container."""


def _checksum(buf: bytes) -> bytes:
    return hashlib.blake2b(buf, digest_size=8).digest()


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        key = arr.dtype.newbyteorder("<").str if arr.dtype.itemsize > 1 else arr.dtype.str
        if key not in _TAG_OF:
            raise TypeError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(struct.pack("<B", _TAG_OF[key]))
        parts.append(np.ascontiguousarray(arr, dtype=_TAGS[_TAG_OF[key]]).tobytes())
    body = b"".join(parts)
    return body + _checksum(body)


def decode_tensors(buf: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CheckpointFormatError(f"{source}: bad magic at byte offset 0")
    if len(buf) < 20:
        raise CheckpointFormatError(f"{source}: truncated at byte offset {len(buf)}")
    body, tail = buf[:-8], buf[-8:]
    if _checksum(body) != tail:
        raise CheckpointFormatError(f"{source}: checksum mismatch (file corrupted or truncated)")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"{source}: unsupported version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(body):
            raise CheckpointFormatError(f"{source}: truncated at byte offset {off}")
        chunk = body[off : off + n]
        off += n
        return chunk

    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        (tag,) = struct.unpack("<B", take(1))
        if tag not in _TAGS:
            raise CheckpointFormatError(f"{source}: unknown dtype tag {tag} at byte offset {off - 1}")
        dt = _TAGS[tag]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(take(size), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if off != len(body):
        raise CheckpointFormatError(f"{source}: {len(body) - off} trailing bytes at byte offset {off}")
    return out


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_tensors(tensors))
    os.replace(tmp, path)


def load_tensors(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes(), str(path))
