"""Versioned binary container for arrays plus JSON metadata.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"ADVPURIF"
    8       4     format version (uint32)
    12      8     header length H (uint64)
    20      H     header: UTF-8 JSON, keys sorted, no whitespace
    20+H    P     payload: raw array bytes, concatenated in header order
    20+H+P  32    SHA-256 of bytes [0, 20+H+P)

The header holds ``{"meta": {...}, "arrays": [{"name", "dtype", "shape",
"offset", "nbytes"}, ...]}``. Array dtypes are stored in little-endian byte
order. Writing the same (meta, arrays) twice produces identical bytes, so
save -> load -> save is byte-stable.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointVersionError, CorruptCheckpointError

MAGIC = b"ADVPURIF"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST_SIZE = 32


def encode(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"meta": meta, "arrays": entries}, sort_keys=True, separators=(",", ":"), allow_nan=False
    ).encode("utf-8")
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < _PREFIX.size + _DIGEST_SIZE:
        raise CorruptCheckpointError(f"file too short ({len(blob)} bytes)")
    magic, version, header_len = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CorruptCheckpointError("bad magic number")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"container format version {version}, this build reads version {FORMAT_VERSION}"
        )
    body, digest = blob[:-_DIGEST_SIZE], blob[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError("digest mismatch (truncated or modified file)")
    start = _PREFIX.size
    try:
        header = json.loads(body[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable header: {exc}") from exc
    payload = body[start + header_len :]
    arrays = {}
    for entry in header["arrays"]:
        lo, n = entry["offset"], entry["nbytes"]
        if lo + n > len(payload):
            raise CorruptCheckpointError(f"array {entry['name']!r} runs past end of payload")
        arr = np.frombuffer(payload[lo : lo + n], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header["meta"], arrays


def write(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    try:
        path.write_bytes(encode(meta, arrays))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
