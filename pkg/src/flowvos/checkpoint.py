"""Versioned binary container for named float64 tensors.

Layout (all little-endian): 4-byte magic ``FVOS``, uint32 format version,
uint32 tensor count; then per tensor a uint16 name length, the UTF-8 name,
a uint8 rank, int64 extents, and the row-major float64 payload.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"FVOS"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_named(path, items: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(items)))
        for name, arr in items.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", a.ndim))
            for d in a.shape:
                fh.write(struct.pack("<q", d))
            fh.write(a.tobytes())


def load_named(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        items = {}
        for _ in range(count):
            nlen, = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            rank, = struct.unpack("<B", fh.read(1))
            shape = struct.unpack("<" + "q" * rank, fh.read(8 * rank)) if rank else ()
            n = int(np.prod(shape)) if rank else 1
            payload = fh.read(8 * n)
            if len(payload) < 8 * n:
                raise CheckpointError(f"{path}: truncated payload for tensor {name!r}")
            items[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        return items
