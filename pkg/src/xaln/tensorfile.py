"""Single-file container for named arrays plus a JSON metadata header.

Layout::

    b"XALN"  u32 version  u64 header_len  header (UTF-8 JSON)  payloads

The header lists every tensor's name, dtype, shape, byte offset and length,
plus a SHA-256 of the payload section. Payloads are little-endian and stored
in header order. Writes go to a temporary file that is renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"XALN"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class TensorFileError(ValueError):
    """The file is truncated, corrupted or of an unsupported version."""


def _le(arr: np.ndarray) -> np.ndarray:
    # ascontiguousarray would promote 0-d arrays to 1-d
    arr = np.array(arr, order="C", copy=not arr.flags.c_contiguous)
    if arr.dtype.byteorder == ">" or (arr.dtype.byteorder == "=" and not np.little_endian):
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def encode(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, value in tensors.items():
        arr = _le(np.asarray(value))
        if arr.dtype == object:
            raise TypeError(f"tensor {name!r} has object dtype")
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {"tensors": entries, "meta": meta or {}, "sha256": hashlib.sha256(payload).hexdigest()}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + payload


def decode(data: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict]:
    if len(data) < _PREFIX.size:
        raise TensorFileError(f"{source}: truncated (no header)")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise TensorFileError(f"{source}: not a tensor file (bad magic {magic!r})")
    if version != VERSION:
        raise TensorFileError(f"{source}: unsupported format version {version} (expected {VERSION})")
    start = _PREFIX.size + hlen
    if len(data) < start:
        raise TensorFileError(f"{source}: truncated header")
    try:
        header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFileError(f"{source}: corrupt header ({exc})") from None
    payload = data[start:]
    expected = sum(e["nbytes"] for e in header["tensors"])
    if len(payload) != expected:
        raise TensorFileError(f"{source}: corrupt payload ({len(payload)} bytes, expected {expected})")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise TensorFileError(f"{source}: payload checksum mismatch")
    tensors = {}
    for e in header["tensors"]:
        raw = payload[e["offset"]: e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(tuple(e["shape"])).copy()
    return tensors, header["meta"]


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    atomic_write_bytes(path, encode(tensors, meta))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    return decode(path.read_bytes(), str(path))


def digest(obj) -> str:
    """Stable short hash of a JSON-serialisable object."""
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def array_digest(arr: np.ndarray) -> str:
    arr = _le(np.asarray(arr))
    h = hashlib.sha256(f"{arr.dtype.str}{arr.shape}".encode())
    h.update(arr.tobytes())
    return h.hexdigest()[:16]
