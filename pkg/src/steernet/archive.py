"""Binary tensor archive ("HSTR1").

Layout, all integers little-endian::

    magic   b"HSTR1"
    version u32
    count   u64
    count x entry:
        name_len u64, name (UTF-8)
        dtype    u8  (code from DTYPES)
        rank     u64, dims u64 x rank
        values   raw little-endian bytes, C order
    checksum u64  (blake2b-64 of every preceding byte)
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import ChecksumError, FormatError

MAGIC = b"HSTR1"
VERSION = 1
DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i4"),
    3: np.dtype("<i8"),
    4: np.dtype("u1"),
    5: np.dtype("<f2"),
}
_CODES = {(dt.kind, dt.itemsize): code for code, dt in DTYPES.items()}
META_KEY = "__meta__"


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def encode(tensors: dict) -> bytes:
    """Serialize ``{name: array}`` in insertion order."""
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value)
        if arr.dtype == np.bool_:
            arr = arr.astype(np.uint8)
        code = _CODES.get((arr.dtype.kind, arr.dtype.itemsize))
        if code is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
        key = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(key)))
        parts.append(key)
        parts.append(struct.pack("<BQ", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(raw)
    body = b"".join(parts)
    return body + _digest(body)


def decode(data: bytes) -> dict:
    if len(data) < len(MAGIC) + 12 + 8 or data[: len(MAGIC)] != MAGIC:
        raise FormatError("not an HSTR1 archive (bad magic)")
    body, stored = data[:-8], data[-8:]
    (version,) = struct.unpack_from("<I", data, len(MAGIC))
    if version != VERSION:
        raise FormatError(f"unsupported archive version {version}")
    if _digest(body) != stored:
        raise ChecksumError("archive checksum mismatch")
    off = len(MAGIC) + 4
    (count,) = struct.unpack_from("<Q", body, off)
    off += 8
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<Q", body, off)
            off += 8
            name = body[off: off + n].decode("utf-8")
            off += n
            code, rank = struct.unpack_from("<BQ", body, off)
            off += 9
            dims = struct.unpack_from(f"<{rank}Q", body, off)
            off += 8 * rank
            if code not in DTYPES:
                raise FormatError(f"{name}: unknown dtype code {code}")
            if name in out:
                raise FormatError(f"duplicate entry {name!r}")
            dt = DTYPES[code]
            size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if off + size > len(body):
                raise FormatError("truncated archive")
            out[name] = np.frombuffer(body, dtype=dt, count=size // dt.itemsize, offset=off).reshape(dims).copy()
            off += size
    except struct.error as exc:
        raise FormatError(f"truncated archive: {exc}") from None
    if off != len(body):
        raise FormatError("trailing bytes after the last entry")
    return out


def save_checkpoint(tensors: dict, path, meta: dict | None = None) -> Path:
    """Write an archive atomically; ``meta`` is stored as a JSON byte entry."""
    tensors = dict(tensors)
    if meta is not None:
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        tensors[META_KEY] = np.frombuffer(blob, dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(tensors))
    os.replace(tmp, path)
    return path


def load_checkpoint(path, with_meta: bool = False):
    """Read an archive; returns tensors, or (tensors, meta) when ``with_meta``."""
    tensors = decode(Path(path).read_bytes())
    blob = tensors.pop(META_KEY, None)
    if not with_meta:
        return tensors
    meta = json.loads(bytes(blob).decode("utf-8")) if blob is not None else {}
    return tensors, meta
