"""Reading and writing the LTSR binary tensor format.

Layout: magic bytes b"LTSR", u32 version, u32 ndim, u32 dims[ndim],
then the row-major little-endian float32 payload. Used for images,
complex fields stored as two channels, and feature maps.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"LTSR"
VERSION = 1


class LTSRError(ValueError):
    pass


def write_ltsr(path, array) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_ltsr(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != MAGIC:
        raise LTSRError(f"{path}: not an LTSR file (bad magic)")
    version, ndim = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise LTSRError(f"{path}: unsupported LTSR version {version}")
    header_end = 12 + 4 * ndim
    if len(data) < header_end:
        raise LTSRError(f"{path}: truncated LTSR header")
    dims = struct.unpack_from(f"<{ndim}I", data, 12)
    count = int(np.prod(dims)) if ndim else 1
    payload = data[header_end:]
    if len(payload) < 4 * count:
        raise LTSRError(f"{path}: truncated LTSR payload")
    arr = np.frombuffer(payload[: 4 * count], dtype="<f4").reshape(dims)
    return arr.astype(np.float32)
