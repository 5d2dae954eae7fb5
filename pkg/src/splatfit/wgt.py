"""Binary tensor container (.wgt) and multi-tensor archive I/O.

Single tensor file: magic ``WGT1``, u32 rank, u32 dims (little-endian),
row-major float32 payload.  Archives pack several named WGT1 blobs plus a
JSON manifest into one file (magic ``WGTA``); byte layout is fully
deterministic so checkpoints round-trip bitwise.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"WGT1"
ARCHIVE_MAGIC = b"WGTA"


class WgtFormatError(ValueError):
    pass


def tensor_to_bytes(arr) -> bytes:
    arr = np.asarray(arr, dtype=np.float32)
    header = MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise WgtFormatError("bad magic, not a WGT1 tensor")
    if len(buf) < 8:
        raise WgtFormatError("truncated header")
    (rank,) = struct.unpack_from("<I", buf, 4)
    if len(buf) < 8 + 4 * rank:
        raise WgtFormatError("truncated shape")
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    offset = 8 + 4 * rank
    n = int(np.prod(shape)) if rank else 1
    if len(buf) < offset + 4 * n:
        raise WgtFormatError("truncated payload")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=offset)
    return data.reshape(shape).astype(np.float32)


def write_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())


def write_archive(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named tensors plus a JSON manifest as one archive file."""
    manifest = dict(meta or {})
    manifest["tensors"] = sorted(tensors)
    meta_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        fh.write(struct.pack("<II", len(tensors), len(meta_bytes)))
        fh.write(meta_bytes)
        for name in sorted(tensors):
            blob = tensor_to_bytes(tensors[name])
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<HQ", len(name_b), len(blob)))
            fh.write(name_b)
            fh.write(blob)


def read_archive(path):
    """Return (tensors dict, manifest dict)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != ARCHIVE_MAGIC:
        raise WgtFormatError("bad magic, not a WGTA archive")
    count, meta_len = struct.unpack_from("<II", buf, 4)
    offset = 12
    manifest = json.loads(buf[offset:offset + meta_len].decode("utf-8"))
    offset += meta_len
    tensors = {}
    for _ in range(count):
        name_len, blob_len = struct.unpack_from("<HQ", buf, offset)
        offset += 10
        name = buf[offset:offset + name_len].decode("utf-8")
        offset += name_len
        tensors[name] = tensor_from_bytes(buf[offset:offset + blob_len])
        offset += blob_len
    return tensors, manifest
