"""Binary checkpoint files for named float64 tensors.

Layout (all integers little-endian)::

    b"ETCK"  u32 version (=1)  u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 dtype (0 = float64),
                u8 rank, rank x u64 dims, row-major float64 payload
"""

from __future__ import annotations

import os
import struct
import tempfile
from typing import Mapping

import numpy as np

from .errors import CheckpointFormatError

MAGIC = b"ETCK"
VERSION = 1
DTYPE_F64 = 0
_HEADER = struct.Struct("<4sII")


def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, len(tensors))]
    for name, value in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name {name[:40]!r}... is longer than 65535 bytes")
        arr = np.array(getattr(value, "data", value), dtype="<f8", order="C")
        if arr.ndim > 0xFF:
            raise ValueError(f"tensor {name!r} has rank {arr.ndim} > 255")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", DTYPE_F64, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(size: int, what: str) -> memoryview:
        nonlocal pos
        if pos + size > len(view):
            raise CheckpointFormatError(
                f"truncated file: {what} needs {size} bytes, {len(view) - pos} left", pos)
        chunk = view[pos:pos + size]
        pos += size
        return chunk

    magic, version, count = _HEADER.unpack(take(_HEADER.size, "header"))
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {bytes(magic)!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", 4)

    out: dict[str, np.ndarray] = {}
    for index in range(count):
        start = pos
        (length,) = struct.unpack("<H", take(2, f"name length of tensor #{index}"))
        try:
            name = bytes(take(length, f"name of tensor #{index}")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"tensor #{index}: name is not valid UTF-8", start + 2) from exc
        dtype, rank = struct.unpack("<BB", take(2, f"dtype and rank of tensor {name!r}"))
        if dtype != DTYPE_F64:
            raise CheckpointFormatError(f"tensor {name!r}: unknown dtype code {dtype}", pos - 2)
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, f"dims of tensor {name!r}"))
        if name in out:
            raise CheckpointFormatError(f"duplicate tensor name {name!r}", start)
        nbytes = 8 * int(np.prod(shape, dtype=object))
        payload = take(nbytes, f"payload of tensor {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(view):
        raise CheckpointFormatError(f"{len(view) - pos} trailing bytes after the last tensor", pos)
    return out


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    """Write ``tensors`` in insertion order; the file is replaced atomically."""
    write_atomic(path, encode_checkpoint(tensors))


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def write_atomic(path: str | os.PathLike, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def model_tensors(model) -> dict[str, np.ndarray]:
    """Base weights and adapter state of a toy model under stable names."""
    out = {}
    for i, layer in enumerate(model.layers):
        out[f"layer{i}.W"] = layer.W.data
        out[f"layer{i}.b"] = layer.b.data
        for key, value in layer.adapter.state().items():
            out[f"layer{i}.adapter.{key}"] = value
    return out


def load_adapter_tensors(model, tensors: Mapping[str, np.ndarray]) -> None:
    """Restore adapter state saved by :func:`model_tensors` into ``model``."""
    for i, layer in enumerate(model.layers):
        prefix = f"layer{i}.adapter."
        layer.adapter.load_state({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
