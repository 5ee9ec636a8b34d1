"""
Binary tensor container and small JSON helpers.

Layout of a tensor file (all integers little-endian)::

    b"AQTN" | u32 version | u32 dtype code | u32 rank | u64 dims[rank] | payload | u32 crc32

The CRC covers every byte before it. Files carry no timestamps, so equal
arrays always produce equal bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"AQTN"
VERSION = 1
DTYPE_CODES = {np.dtype("<f8"): 1, np.dtype("<f4"): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class TensorFileError(IOError):
    """Malformed or corrupted tensor file."""


def encode_tensor(array) -> bytes:
    a = np.asarray(array)
    if a.dtype.kind != "f" or a.dtype.itemsize not in (4, 8):
        a = a.astype(np.float64)
    dtype = a.dtype.newbyteorder("<")
    code = DTYPE_CODES[dtype]
    header = MAGIC + struct.pack("<III", VERSION, code, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    body = header + np.ascontiguousarray(a, dtype=dtype).tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 20 or buf[:4] != MAGIC:
        raise TensorFileError("not a tensor file (bad magic)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise TensorFileError("CRC mismatch")
    version, code, rank = struct.unpack("<III", body[4:16])
    if version != VERSION:
        raise TensorFileError(f"unsupported version {version}")
    if code not in CODE_DTYPES:
        raise TensorFileError(f"unknown dtype code {code}")
    off = 16 + 8 * rank
    dims = struct.unpack(f"<{rank}Q", body[16:off])
    dtype = CODE_DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(body) - off != expected:
        raise TensorFileError(f"payload is {len(body) - off} bytes, expected {expected}")
    return np.frombuffer(body, dtype=dtype, offset=off).reshape(dims).copy()


def atomic_write(path, data: bytes) -> None:
    """Write through a temporary file so readers never see a partial file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_tensor(path, array) -> None:
    atomic_write(path, encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    atomic_write(path, dumps_json(obj).encode())


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def sha256_hex(data) -> str:
    if isinstance(data, np.ndarray):
        data = np.ascontiguousarray(data).tobytes()
    elif isinstance(data, str):
        data = data.encode()
    return hashlib.sha256(data).hexdigest()
