"""Binary checkpoint format.

Layout: magic "SNWF" | format version u32 LE | tensor count u64 LE |
per tensor: name length u32 LE, name UTF-8, dtype tag u8 (0=f32, 1=f64),
rank u32 LE, dims u64 LE each, raw little-endian element bytes |
trailing CRC32 of all preceding bytes.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import (
    BadMagic,
    IoError,
    ShapeMismatch,
    TensorCountMismatch,
    VersionMismatch,
)

MAGIC = b"SNWF"
VERSION = 1

_TAG = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_tensors(tensors: dict, path) -> bytes:
    """Serialize name->ndarray sorted by name; returns the written bytes."""
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype not in _TAG:
            raise IoError(f"checkpoint: {name} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BI", _TAG[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    blob = b"".join(parts)
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    try:
        with open(path, "wb") as f:
            f.write(blob)
    except OSError as e:
        raise IoError(f"cannot write checkpoint {path}: {e}") from e
    return blob


def load_tensors(path) -> dict:
    """Parse a checkpoint back into name->ndarray."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise IoError(f"cannot read checkpoint {path}: {e}") from e
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagic(f"{path}: not a checkpoint file (bad magic)")
    if len(blob) < 16 + 4:
        raise TensorCountMismatch(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {VERSION}")
    body, (crc,) = blob[:-4], struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise IoError(f"{path}: checksum mismatch")
    (count,) = struct.unpack_from("<Q", blob, 8)
    out: dict = {}
    off = 16
    end = len(body)
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off:off + nlen].decode("utf-8")
            off += nlen
            tag, rank = struct.unpack_from("<BI", body, off)
            off += 5
            dims = struct.unpack_from(f"<{rank}Q", body, off)
            off += 8 * rank
            dt = _DTYPE[tag]
            n_bytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if off + n_bytes > end:
                raise struct.error("payload past end")
            out[name] = np.frombuffer(
                body, dtype=dt, count=n_bytes // dt.itemsize, offset=off
            ).reshape(dims).astype(dt.newbyteorder("="))
            off += n_bytes
        except (struct.error, KeyError) as e:
            raise TensorCountMismatch(f"{path}: truncated or corrupt tensor record: {e}") from e
    if off != end:
        raise TensorCountMismatch(f"{path}: {end - off} trailing bytes after {count} tensors")
    return out


def assign_params(params: dict, tensors: dict, prefix: str = ""):
    """Copy named arrays into parameter tensors; mismatches are collected."""
    bad = []
    missing = []
    for name, p in params.items():
        key = prefix + name
        if key not in tensors:
            missing.append(key)
        elif tensors[key].shape != p.data.shape:
            bad.append(f"{key}: file {tensors[key].shape} vs model {p.data.shape}")
    if missing or bad:
        raise ShapeMismatch(
            "checkpoint does not match model: "
            + "; ".join(["missing " + k for k in missing] + bad)
        )
    for name, p in params.items():
        p.data = tensors[prefix + name].astype(p.data.dtype)
