"""Reader/writer for the ``.tns`` tensor file format.

Layout: magic ``CITN``, u8 version (1), u8 rank, little-endian u32 dims,
then the float64 little-endian payload in row-major order.
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CITN"
VERSION = 1


class TnsFormatError(ValueError):
    pass


def encode(array):
    arr = np.array(array, dtype="<f8", order="C")  # ascontiguousarray would promote rank 0 to rank 1
    if arr.ndim > 255:
        raise TnsFormatError("rank exceeds 255")
    header = MAGIC + struct.pack("<BB", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode(buf, name="<buffer>"):
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise TnsFormatError(f"{name}: bad magic")
    version, rank = struct.unpack_from("<BB", buf, 4)
    if version != VERSION:
        raise TnsFormatError(f"{name}: unsupported version {version}")
    head = 6 + 4 * rank
    if len(buf) < head:
        raise TnsFormatError(f"{name}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, 6)
    count = int(np.prod(dims)) if rank else 1
    if len(buf) != head + 8 * count:
        raise TnsFormatError(f"{name}: payload holds {len(buf) - head} bytes, expected {8 * count}")
    return np.frombuffer(buf, dtype="<f8", offset=head, count=count).reshape(dims).astype(np.float64)


def save(path, array):
    """Write ``array`` and return the sha256 hex digest of the file bytes."""
    buf = encode(array)
    Path(path).write_bytes(buf)
    return hashlib.sha256(buf).hexdigest()


def load(path, sha256=None):
    path = Path(path)
    buf = path.read_bytes()
    if sha256 is not None and hashlib.sha256(buf).hexdigest() != sha256:
        raise TnsFormatError(f"{path.name}: checksum mismatch")
    return decode(buf, path.name)
