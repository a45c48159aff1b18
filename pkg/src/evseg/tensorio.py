"""Flat little-endian float32 tensor files.

Layout: magic ``b"EVTN"``, version u16, ndim u16, ndim x u32 dims, then the
float32 payload in C order.  Used for voxel grids (B, H, W) and flow fields
(2, H, W).
"""
import struct

import numpy as np

MAGIC = b"EVTN"
VERSION = 1


class TensorFormatError(ValueError):
    pass


def save_tensor(array, path):
    a = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HH", VERSION, a.ndim))
        f.write(struct.pack(f"<{a.ndim}I", *a.shape))
        f.write(a.tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8 or data[:4] != MAGIC:
        raise TensorFormatError(f"{path}: not a tensor file")
    version, ndim = struct.unpack_from("<HH", data, 4)
    if version != VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    off = 8 + 4 * ndim
    if len(data) < off:
        raise TensorFormatError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{ndim}I", data, 8)
    n = int(np.prod(shape)) if ndim else 1
    if len(data) - off != 4 * n:
        raise TensorFormatError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(data, dtype="<f4", offset=off).reshape(shape).copy()
