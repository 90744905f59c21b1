"""Flat binary weight files.

Layout (all integers little-endian uint32):

    b"RAFW1"  count
    repeated ``count`` times, in store order:
        name_len  name (utf-8)  ndim  dim_0 ... dim_{ndim-1}  payload

``payload`` is ``prod(dims)`` little-endian float64 values in row-major order.
Frozen parameters are written too, so a file fully determines a model.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import ParameterStore

MAGIC = b"RAFW1"


def dumps(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:5] != MAGIC:
        raise ValueError(f"not a weight file (magic {blob[:5]!r})")
    (count,) = struct.unpack_from("<I", blob, 5)
    pos = 9
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(blob):
        raise ValueError(f"trailing {len(blob) - pos} bytes in weight file")
    return out


def save_weights(store: ParameterStore | dict[str, np.ndarray], path: Path) -> None:
    arrays = store.snapshot() if isinstance(store, ParameterStore) else store
    Path(path).write_bytes(dumps(arrays))


def load_weights(path: Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
