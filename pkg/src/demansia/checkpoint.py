"""Binary tensor container and the flat key=value config text format.

Container layout, all little-endian: the 5-byte magic ``DMNS1``, a u32
record count, then per record a u32 name length, the UTF-8 name, a u32
rank, one u64 per dimension, and the raw float64 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError

MAGIC = b"DMNS1"

__all__ = ["MAGIC", "write_tensors", "read_tensors", "parse_kv_text", "format_kv_text"]


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays in insertion order."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        data = np.asarray(arr, dtype="<f8")
        if not data.flags["C_CONTIGUOUS"]:
            data = np.ascontiguousarray(data)  # 0-d arrays never land here
        enc = name.encode("utf-8")
        blob += struct.pack("<I", len(enc))
        blob += enc
        blob += struct.pack("<I", data.ndim)
        for dim in data.shape:
            blob += struct.pack("<Q", dim)
        blob += data.tobytes()
    Path(path).write_bytes(bytes(blob))


def read_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic in {path}: {raw[:len(MAGIC)]!r}")
    pos = len(MAGIC)

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise CheckpointError(f"truncated container {path}")
        out = struct.unpack_from(fmt, raw, pos)
        pos += size
        return out

    (count,) = take("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<I")
        if pos + name_len > len(raw):
            raise CheckpointError(f"truncated container {path}")
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = take("<I")
        shape = tuple(take("<" + "Q" * rank)) if rank else ()
        n = int(np.prod(shape)) if shape else 1
        size = 8 * n
        if pos + size > len(raw):
            raise CheckpointError(f"truncated container {path}")
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape)
        tensors[name] = arr.astype(np.float64)
        pos += size
    return tensors


def parse_kv_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; blank lines and # comments are skipped."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


def format_kv_text(pairs: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in pairs.items())
