"""Bit-exact binary tensor container.

Layout (all integers little-endian):

    offset  size        field
    0       4           magic  b"PNCL"
    4       4           version u32 (currently 1)
    8       4           dtype code u32: 1 = f32, 2 = u32
    12      4           rank u32
    16      8 * rank    dims, u64 each
    ...     4           meta length u32
    ...     meta_len    UTF-8 JSON sidecar (provenance, config echo)
    ...     payload     row-major array data
    end-4   4           CRC32 (zlib) over every preceding byte

Writes are atomic: data goes to a temp file in the target directory and
is renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"PNCL"
VERSION = 1

_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<u4")}
_CODES_BY_KIND = {"f": 1, "u": 2}


def _dtype_code(array: np.ndarray) -> int:
    kind = array.dtype.kind
    if kind == "f":
        return 1
    if kind in ("u", "i"):
        return 2
    raise FormatError(f"unsupported dtype {array.dtype} for tensor container")


def write_tensor(array: np.ndarray, path: str | Path, meta: dict | None = None) -> None:
    """Serialize one array plus its JSON sidecar, atomically."""
    path = Path(path)
    array = np.asarray(array)
    code = _dtype_code(array)
    payload = np.ascontiguousarray(array.astype(_DTYPE_CODES[code], copy=False)).tobytes()

    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8") if meta else b""
    header = bytearray()
    header += MAGIC
    header += struct.pack("<III", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    header += struct.pack("<I", len(meta_bytes))
    header += meta_bytes

    blob = bytes(header) + payload
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)

    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(text: str, path: str | Path) -> None:
    """Write text via a temp file in the target directory plus rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_tensor(path: str | Path) -> tuple[np.ndarray, dict]:
    """Read an array and its sidecar; verifies magic, version, length, CRC."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 20:
        raise FormatError(f"{path}: file too short ({len(blob)} bytes) for header")
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r} at offset 0, expected {MAGIC!r}")
    version, code, rank = struct.unpack_from("<III", blob, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    if code not in _DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code} at offset 8")
    offset = 16
    if len(blob) < offset + 8 * rank + 4:
        raise FormatError(f"{path}: truncated dims block at offset {offset}")
    dims = struct.unpack_from(f"<{rank}Q", blob, offset)
    offset += 8 * rank
    (meta_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4

    dtype = _DTYPE_CODES[code]
    payload_len = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
    if rank == 0:
        payload_len = dtype.itemsize
    expected = offset + meta_len + payload_len + 4
    if len(blob) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes "
            f"(header {offset} + meta {meta_len} + payload {payload_len} + crc 4), got {len(blob)}"
        )

    (stored_crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    actual_crc = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise FormatError(
            f"{path}: checksum mismatch at offset {len(blob) - 4}: "
            f"stored 0x{stored_crc:08x}, computed 0x{actual_crc:08x}"
        )

    meta_bytes = blob[offset : offset + meta_len]
    try:
        meta = json.loads(meta_bytes.decode("utf-8")) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: invalid JSON sidecar at offset {offset}: {exc}") from exc

    start = offset + meta_len
    array = np.frombuffer(blob[start : start + payload_len], dtype=dtype).reshape(dims)
    return array, meta
