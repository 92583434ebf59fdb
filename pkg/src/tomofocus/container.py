"""Portable binary tensor container ("TFC1").

Layout, all integers little-endian::

    b"TFC1"
    u32 meta_len, meta_len bytes of UTF-8 JSON (object, "{}" when unused)
    u32 n_arrays
    n_arrays records:
        u16 name_len, name (UTF-8)
        u8  dtype code (1 = float64, 2 = complex128)
        u8  rank
        rank x u64 dims
        payload, row-major, little-endian
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ContainerError

MAGIC = b"TFC1"
DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<c16")}
CODES = {np.dtype("<f8"): 1, np.dtype("<c16"): 2}


def _as_storable(name, arr):
    a = np.asarray(arr)
    if np.iscomplexobj(a):
        return np.asarray(a, dtype="<c16", order="C")
    if a.dtype.kind in "biuf":
        return np.asarray(a, dtype="<f8", order="C")
    raise ContainerError(f"array {name!r}: unsupported dtype {a.dtype}")


def dumps(arrays: dict, meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    mb = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(mb)))
    buf.write(mb)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        a = _as_storable(name, arr)
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF or a.ndim > 0xFF:
            raise ContainerError(f"array {name!r}: name or rank too large")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", CODES[a.dtype], a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(a.tobytes(order="C"))
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def loads(data: bytes) -> tuple[dict, dict]:
    """Parse a container; returns ``(arrays, meta)`` or raises ContainerError."""
    if len(data) < 16 or data[:4] != MAGIC:
        raise ContainerError("not a TFC1 container")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ContainerError("CRC mismatch: container is corrupted or truncated")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise ContainerError("unexpected end of container")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    (mlen,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(take(mlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"bad metadata block: {exc}") from None
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in DTYPES:
            raise ContainerError(f"array {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(n * dt.itemsize)
        if name in arrays:
            raise ContainerError(f"duplicate array name {name!r}")
        arrays[name] = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
    if pos != len(body):
        raise ContainerError("trailing bytes after last record")
    return arrays, meta


def save(path, arrays: dict, meta: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(dumps(arrays, meta))
    os.replace(tmp, path)


def load(path) -> tuple[dict, dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ContainerError(f"cannot read {path}: {exc}") from None
    return loads(data)
