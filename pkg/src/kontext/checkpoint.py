"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic   8 bytes  b"KTXCKPT1"
    version u32
    count   u64
    entries count x { name_len u32, name utf-8, rank u32, dims u64 x rank, f32 payload }
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from kontext.errors import ContractError

MAGIC = b"KTXCKPT1"
VERSION = 1


def encode(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(entries))]
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    try:
        return _decode(blob)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, ContractError):
            raise
        raise ContractError(f"truncated or corrupt checkpoint: {exc}") from exc


def _decode(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise ContractError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<IQ", blob, 8)
    if version != VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    off = 20
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        out[name] = arr.astype(np.float32)
    if off != len(blob):
        raise ContractError("trailing bytes after last checkpoint entry")
    return out


def save(path: str | Path, entries: Mapping[str, np.ndarray]) -> str:
    """Write atomically; returns the sha256 of the file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode(entries)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return hashlib.sha256(blob).hexdigest()


def load(path: str | Path, schema: Mapping[str, tuple[int, ...]] | None = None) -> dict[str, np.ndarray]:
    entries = decode(Path(path).read_bytes())
    if schema is not None:
        validate(entries, schema)
    return entries


def validate(entries: Mapping[str, np.ndarray], schema: Mapping[str, tuple[int, ...]]) -> None:
    missing = sorted(set(schema) - set(entries))
    if missing:
        raise ContractError(f"checkpoint missing entries: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    for name, shape in schema.items():
        if tuple(entries[name].shape) != tuple(shape):
            raise ContractError(f"checkpoint entry {name!r} has shape {entries[name].shape}, expected {tuple(shape)}")


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
