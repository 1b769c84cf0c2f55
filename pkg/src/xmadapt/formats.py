"""Binary file formats: MMRI tensors and XMCK checkpoints.

MMRI: b"MMRI", version 0x01, ndim (u8), ndim x u32 LE dims, f32 LE data.

XMCK: b"XMCK", version 0x01, entry count (u32 LE), then per entry
name length (u32 LE), UTF-8 name, trainable (u8), ndim (u32 LE),
ndim x u32 LE dims, f32 LE data.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError

MMRI_MAGIC = b"MMRI"
XMCK_MAGIC = b"XMCK"
VERSION = 1


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim > 255:
        raise DataFormatError("too many dimensions for MMRI")
    head = MMRI_MAGIC + bytes([VERSION, arr.ndim]) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MMRI_MAGIC:
        raise DataFormatError(f"{source}: bad magic, not an MMRI tensor")
    if buf[4] != VERSION:
        raise DataFormatError(f"{source}: unsupported MMRI version {buf[4]}")
    ndim = buf[5]
    off = 6 + 4 * ndim
    if len(buf) < off:
        raise DataFormatError(f"{source}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", buf, 6)
    count = int(np.prod(dims)) if ndim else 1
    if len(buf) != off + 4 * count:
        raise DataFormatError(f"{source}: expected {count} floats, found {(len(buf) - off) / 4:g}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float32).reshape(dims)


def write_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except FileNotFoundError:
        raise DataFormatError(f"missing tensor file {path}") from None
    return decode_tensor(buf, os.fspath(path))


@dataclass
class CheckpointEntry:
    name: str
    trainable: bool
    data: np.ndarray


def write_checkpoint(path, entries: list[CheckpointEntry]) -> None:
    out = io.BytesIO()
    out.write(XMCK_MAGIC + bytes([VERSION]) + struct.pack("<I", len(entries)))
    for e in entries:
        name = e.name.encode("utf-8")
        arr = np.ascontiguousarray(e.data, dtype="<f4")
        out.write(struct.pack("<I", len(name)) + name + bytes([1 if e.trainable else 0]))
        out.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(out.getvalue())


def read_checkpoint(path) -> list[CheckpointEntry]:
    with open(path, "rb") as fh:
        buf = fh.read()
    src = os.fspath(path)
    if buf[:4] != XMCK_MAGIC:
        raise DataFormatError(f"{src}: bad magic, not an XMCK checkpoint")
    if len(buf) < 9:
        raise DataFormatError(f"{src}: truncated header")
    if buf[4] != VERSION:
        raise DataFormatError(f"{src}: unsupported checkpoint version {buf[4]}")
    (count,) = struct.unpack_from("<I", buf, 5)
    off = 9
    entries = []
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name_bytes = buf[off:off + nlen]
            if len(name_bytes) != nlen:
                raise DataFormatError(f"{src}: truncated entry name")
            name = name_bytes.decode("utf-8")
            off += nlen
            trainable = bool(buf[off])
            off += 1
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            n = int(np.prod(dims)) if ndim else 1
            if off + 4 * n > len(buf):
                raise DataFormatError(f"{src}: truncated data for {name!r}")
            data = np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(dims)
            off += 4 * n
            entries.append(CheckpointEntry(name, trainable, data))
    except (struct.error, IndexError, UnicodeDecodeError) as exc:
        raise DataFormatError(f"{src}: truncated or corrupt checkpoint ({exc})") from None
    if off != len(buf):
        raise DataFormatError(f"{src}: {len(buf) - off} trailing bytes")
    return entries
