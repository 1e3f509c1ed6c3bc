"""Flat binary weight checkpoints.

Layout: 5-byte magic ``JDLW1``, then per-tensor records until EOF. Each
record is u64-LE name length, UTF-8 name, u64-LE rank, rank u64-LE dims,
then the row-major float64-LE data. Records are written in sorted name
order so files are byte-reproducible.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointMismatch

MAGIC = b"JDLW1"


def save_weights(path, named: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name in sorted(named):
            arr = np.asarray(named[name], dtype="<f8")  # tobytes() emits C order
            raw = name.encode("utf-8")
            f.write(struct.pack("<Q", len(raw)))
            f.write(raw)
            f.write(struct.pack("<Q", arr.ndim))
            f.write(np.asarray(arr.shape, dtype="<u8").tobytes())
            f.write(arr.tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:5] != MAGIC:
        raise CheckpointMismatch(f"{path}: not a JDLW1 checkpoint")
    out: dict[str, np.ndarray] = {}
    pos = 5
    total = len(blob)
    while pos < total:
        if pos + 8 > total:
            raise CheckpointMismatch(f"{path}: truncated record header")
        (name_len,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        dims = np.frombuffer(blob, dtype="<u8", count=rank, offset=pos)
        pos += 8 * rank
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        end = pos + 8 * count
        if end > total:
            raise CheckpointMismatch(f"{path}: truncated data for {name!r}")
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
        out[name] = data.reshape(tuple(int(d) for d in dims)).copy()
        pos = end
    return out
