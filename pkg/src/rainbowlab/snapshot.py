"""Flat binary snapshot format for named float64 arrays.

Layout: magic bytes "RBWP", version u32, array count u32, then a shape
table (per array: name length u32, name utf-8, ndim u32, dims u32 each),
then all payloads as little-endian float64 in table order.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"RBWP"
VERSION = 1


def save_arrays(path, arrays: dict) -> None:
    names = list(arrays)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(names)))
        for name in names:
            encoded = name.encode("utf-8")
            arr = np.asarray(arrays[name])
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for name in names:
            f.write(np.asarray(arrays[name], dtype="<f8").tobytes(order="C"))


def load_arrays(path) -> dict:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a snapshot file (bad magic)")
        version, count = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported snapshot version {version}")
        table = []
        for _ in range(count):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
            table.append((name, shape))
        out = {}
        for name, shape in table:
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape)
            out[name] = data.copy()
        return out
