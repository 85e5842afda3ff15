"""Binary tensor and checkpoint file formats.

SDT1, a single dense tensor::

    magic  b"SDT1"
    u32    rank                  (little endian)
    u32[n] extents
    u8     dtype code            (0 = float32)
    raw little-endian element bytes, row major

SDCK, a named collection of SDT1 records (checkpoints)::

    magic  b"SDCK"
    u32    format version
    u32    tensor count
    per tensor: u16 name length, UTF-8 name bytes, embedded SDT1 record

All file writes go through a temp-file-plus-rename in the target
directory, so an interrupted run never leaves a half-written file.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

SDT1_MAGIC = b"SDT1"
SDCK_MAGIC = b"SDCK"
SDCK_VERSION = 1
_DTYPE_F32 = 0


class FormatError(ValueError):
    """Raised when a file does not match the declared binary layout."""


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write ``payload`` to ``path`` via a temp file and atomic rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def pack_tensor(arr: np.ndarray) -> bytes:
    """Serialize one float32 array as an SDT1 record."""
    arr = np.asarray(arr)
    if arr.dtype != np.float32:
        raise FormatError(f"SDT1 stores float32 tensors, got dtype {arr.dtype}")
    header = SDT1_MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    header += struct.pack("<B", _DTYPE_F32)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def unpack_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one SDT1 record at ``offset``; returns (array, next offset)."""
    if buf[offset : offset + 4] != SDT1_MAGIC:
        raise FormatError(
            f"bad tensor magic {buf[offset:offset + 4]!r}, expected {SDT1_MAGIC!r}"
        )
    offset += 4
    if offset + 4 > len(buf):
        raise FormatError("truncated SDT1 record: missing rank")
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if rank > 32:
        raise FormatError(f"implausible SDT1 rank {rank}")
    if offset + 4 * rank + 1 > len(buf):
        raise FormatError("truncated SDT1 record: missing extents")
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    (code,) = struct.unpack_from("<B", buf, offset)
    offset += 1
    if code != _DTYPE_F32:
        raise FormatError(f"unknown SDT1 dtype code {code}")
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    nbytes = 4 * count
    if offset + nbytes > len(buf):
        raise FormatError("truncated SDT1 record: missing element bytes")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(shape)
    return arr.astype(np.float32, copy=True), offset + nbytes


def write_sdt1(path: str, arr: np.ndarray) -> None:
    atomic_write_bytes(path, pack_tensor(arr))


def read_sdt1(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = unpack_tensor(buf, 0)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after SDT1 record")
    return arr


def write_sdck(path: str, tensors: "list[tuple[str, np.ndarray]]") -> None:
    """Serialize an ordered list of (name, float32 array) as an SDCK file."""
    out = [SDCK_MAGIC, struct.pack("<II", SDCK_VERSION, len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:32]}...")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(pack_tensor(arr))
    atomic_write_bytes(path, b"".join(out))


def read_sdck(path: str) -> "dict[str, np.ndarray]":
    """Parse an SDCK file into an insertion-ordered name -> array dict."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != SDCK_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r}, expected {SDCK_MAGIC!r}")
    if len(buf) < 12:
        raise FormatError("truncated SDCK header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != SDCK_VERSION:
        raise FormatError(f"unsupported SDCK version {version}, expected {SDCK_VERSION}")
    offset = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        if offset + 2 > len(buf):
            raise FormatError("truncated SDCK record: missing name length")
        (nlen,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        if offset + nlen > len(buf):
            raise FormatError("truncated SDCK record: missing name bytes")
        name = buf[offset : offset + nlen].decode("utf-8")
        offset += nlen
        arr, offset = unpack_tensor(buf, offset)
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r} in checkpoint")
        tensors[name] = arr
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after SDCK records")
    return tensors
