"""Portable binary array files.

Layout (little-endian)::

    magic  b"FSEG"
    version u16
    ndim    u16
    dims    u64[ndim]
    data    float32[prod(dims)]

Writes go through a temporary file in the target directory followed by an
atomic rename, so readers never see a partial file.
"""

import hashlib
import os
import struct
import tempfile

import numpy as np

MAGIC = b"FSEG"
VERSION = 1


class CorruptArrayError(ValueError):
    """Raised when an array file is truncated or malformed."""


def encode_array(arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = MAGIC + struct.pack("<HH", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes()


def decode_array(buf):
    buf = bytes(buf)
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise CorruptArrayError("bad magic")
    version, ndim = struct.unpack_from("<HH", buf, 4)
    if version != VERSION:
        raise CorruptArrayError(f"unsupported version {version}")
    off = 8 + 8 * ndim
    if len(buf) < off:
        raise CorruptArrayError("truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", buf, 8)
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(buf) != off + 4 * count:
        raise CorruptArrayError(
            f"expected {off + 4 * count} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", offset=off, count=count).reshape(dims).copy()


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_array(path, arr):
    """Write ``arr`` as float32 and return the SHA-256 of the file bytes."""
    data = encode_array(arr)
    atomic_write_bytes(path, data)
    return hashlib.sha256(data).hexdigest()


def read_array(path):
    with open(path, "rb") as f:
        return decode_array(f.read())
