"""Binary container shared by model files and exported tensor batches.

Layout (all integers little-endian u32)::

    b"ADVG" | version | len(json) | json utf-8 |
    repeated: len(name) | name utf-8 | rank | dims... | float32 LE values
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"ADVG"
VERSION = 1


class FormatError(ValueError):
    """Raised when a file does not follow the ADVG layout."""


def encode(header: Mapping, tensors: Mapping[str, np.ndarray]) -> bytes:
    meta = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4", order="C")  # keeps rank 0, unlike ascontiguousarray
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf = buf
        self.pos = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise FormatError(
                f"{self.source}: truncated while reading {what}: expected {n} bytes "
                f"at offset {self.pos}, only {len(self.buf) - self.pos} available")
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    @property
    def done(self) -> bool:
        return self.pos >= len(self.buf)


def decode(buf: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(buf, source)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    meta_len = r.u32("header length")
    try:
        header = json.loads(r.take(meta_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: header is not valid JSON: {exc}") from None

    tensors: dict[str, np.ndarray] = {}
    while not r.done:
        name_len = r.u32("tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        rank = r.u32(f"rank of {name!r}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name!r}"))
        count = int(np.prod(dims, dtype=np.int64))
        raw = r.take(4 * count, f"values of {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    return header, tensors


def atomic_write_bytes(path, data: bytes) -> None:
    """Write through a temporary file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor_file(path, header: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode(header, tensors))


def read_tensor_file(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    return decode(path.read_bytes(), str(path))
