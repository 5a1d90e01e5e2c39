"""Binary checkpoint format with bit-exact round-tripping.

Layout (all integers little-endian u32, floats little-endian float64):

    magic "HMRA" | format version | records...
    record: key length | key bytes (utf-8) | rank | dims[rank] | values

Record order follows the mapping's iteration order, so writing the same
state twice produces byte-identical files.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"HMRA"
VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray]):
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for key, value in arrays.items():
            arr = np.ascontiguousarray(value, dtype="<f8")
            key_bytes = key.encode("utf-8")
            f.write(struct.pack("<I", len(key_bytes)))
            f.write(key_bytes)
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    pos = 8
    n = len(raw)
    while pos < n:
        (key_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        key = raw[pos:pos + key_len].decode("utf-8")
        pos += key_len
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", raw, pos) if rank else ()
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(dims)
        pos += 8 * count
        out[key] = arr.astype(np.float64, copy=True)
    if pos != n:
        raise DataError(f"{path}: trailing bytes after last record")
    return out
