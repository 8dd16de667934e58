"""Binary checkpoint container.

Layout: ``b"MXCK"``, u16 LE version, u32 LE header length, UTF-8 JSON header,
then raw float64 LE payload. The header lists every named array with its
shape, byte offset (relative to the payload start) and byte length, plus a
free-form ``meta`` object.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MXCK"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class CheckpointError(ValueError):
    pass


def encode_checkpoint(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries},
                        separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def decode_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    """Parse a checkpoint; validates everything before returning any array."""
    if len(blob) < _PREFIX.size or blob[:4] != MAGIC:
        raise CheckpointError("bad magic")
    _, version, hlen = _PREFIX.unpack_from(blob)
    if version != VERSION:
        raise CheckpointError(f"version mismatch: file {version}, expected {VERSION}")
    start = _PREFIX.size + hlen
    if len(blob) < start:
        raise CheckpointError("truncated header")
    try:
        header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
        entries = header["tensors"]
        meta = header.get("meta", {})
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupted header: {exc}") from exc
    payload = memoryview(blob)[start:]
    arrays = {}
    expected_end = 0
    for e in entries:
        try:
            name, shape, off, nbytes = e["name"], tuple(e["shape"]), e["offset"], e["nbytes"]
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"corrupted header entry {e!r}") from exc
        if nbytes != 8 * int(np.prod(shape, dtype=np.int64)) or off != expected_end:
            raise CheckpointError(f"parameter {name!r}: header offsets inconsistent with shape {shape}")
        if off + nbytes > len(payload):
            raise CheckpointError(f"parameter {name!r}: payload truncated")
        arrays[name] = np.frombuffer(payload[off:off + nbytes], dtype="<f8").reshape(shape).copy()
        expected_end = off + nbytes
    if expected_end != len(payload):
        raise CheckpointError(f"payload has {len(payload) - expected_end} trailing bytes")
    return arrays, meta


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(arrays, meta))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    return decode_checkpoint(path.read_bytes())
