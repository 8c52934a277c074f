"""Versioned binary container shared by tables, checkpoints and adjacency exports.

Layout (all integers little-endian)::

    magic    8 bytes   b"FLOWGNN\\0"
    version  u16
    kind     u16 length + utf-8 bytes
    meta     u32 length + utf-8 JSON (sorted keys)
    count    u32 number of arrays
    per array:
        name   u16 length + utf-8 bytes
        dtype  u8 length + ascii numpy dtype string ("<f8", "<i8", ...)
        ndim   u8
        shape  ndim x u64
        data   row-major bytes

No timestamps or other run-dependent values are written, so identical inputs
always serialize to identical bytes.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FLOWGNN\0"
VERSION = 1

_ALLOWED = {"<f8", "<i8", "|u1", "|b1"}


class BlobError(ValueError):
    pass


def _dtype_str(a: np.ndarray) -> str:
    s = a.dtype.str
    if s not in _ALLOWED:
        raise BlobError(f"unsupported dtype {a.dtype} (allowed: {sorted(_ALLOWED)})")
    return s


def dumps(kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    k = kind.encode()
    buf.write(struct.pack("<H", len(k)) + k)
    m = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(m)) + m)
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        if a.dtype == np.float32 or a.dtype == np.float16:
            a = a.astype("<f8")
        elif a.dtype.kind in "iu" and a.dtype.itemsize > 1:
            a = a.astype("<i8")
        ds = _dtype_str(a).encode()
        n = name.encode()
        buf.write(struct.pack("<H", len(n)) + n)
        buf.write(struct.pack("<B", len(ds)) + ds)
        buf.write(struct.pack("<B", a.ndim))
        for d in a.shape:
            buf.write(struct.pack("<Q", d))
        buf.write(a.tobytes(order="C"))
    return buf.getvalue()


def loads(data: bytes, kind: str | None = None) -> tuple[str, dict, dict[str, np.ndarray]]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(view):
            raise BlobError("truncated blob")
        out = bytes(view[pos:pos + n])
        pos += n
        return out

    if take(8) != MAGIC:
        raise BlobError("not a flowgnn blob (bad magic)")
    (version,) = struct.unpack("<H", take(2))
    if version != VERSION:
        raise BlobError(f"unsupported blob version {version}")
    (klen,) = struct.unpack("<H", take(2))
    got_kind = take(klen).decode()
    if kind is not None and got_kind != kind:
        raise BlobError(f"expected a {kind!r} blob, found {got_kind!r}")
    (mlen,) = struct.unpack("<I", take(4))
    meta = json.loads(take(mlen).decode())
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (dlen,) = struct.unpack("<B", take(1))
        dtype = np.dtype(take(dlen).decode())
        (ndim,) = struct.unpack("<B", take(1))
        shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(ndim))
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(take(size), dtype=dtype).reshape(shape).copy()
    return got_kind, meta, arrays


def save(path: str | Path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(kind, meta, arrays))


def load(path: str | Path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    _, meta, arrays = loads(Path(path).read_bytes(), kind)
    return meta, arrays
