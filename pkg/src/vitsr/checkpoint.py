"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"VTSR"  u32 version=1
    u64 metadata length, UTF-8 JSON metadata (sorted keys)
    u32 tensor count
    per tensor: u16 name length, name bytes, u8 dtype code (1 = float32),
                u8 ndim, ndim x u64 dims, raw little-endian payload

Tensors are written in the order given; reading preserves it, so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict

import numpy as np

from .errors import DataError

MAGIC = b"VTSR"
VERSION = 1
DTYPES = {1: np.dtype("<f4")}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}


def encode_checkpoint(metadata, tensors):
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(meta)), meta,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(buf):
    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise DataError("truncated checkpoint")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4) != MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    version, meta_len = struct.unpack("<IQ", take(12))
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    metadata = json.loads(take(meta_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in DTYPES:
            raise DataError(f"tensor {name!r}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dtype = DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(n * dtype.itemsize), dtype=dtype).reshape(shape).copy()
    if pos != len(buf):
        raise DataError("trailing bytes after last tensor")
    return metadata, tensors


def write_checkpoint(path, metadata, tensors):
    data = encode_checkpoint(metadata, tensors)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def read_checkpoint(path):
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(buf)
