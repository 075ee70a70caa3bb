"""Flat binary checkpoint format for named fp32 parameter sets.

Layout (all integers little-endian u32):

    magic   b"NCLW1"
    count   number of records
    record  name_len, name (utf-8), rank, dims[rank], payload (fp32 LE,
            C order)

Records are written in sorted name order so identical parameter sets
serialize to identical bytes. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError

MAGIC = b"NCLW1"


def save_params(path: str | Path, params: dict[str, np.ndarray]) -> None:
    if not params:
        raise ValidationError("refusing to write an empty checkpoint")
    chunks = [MAGIC, struct.pack("<I", len(params))]
    for name in sorted(params):
        # asarray, not ascontiguousarray: the latter promotes rank-0 to
        # rank-1 and the shape would not survive a round-trip
        arr = np.asarray(params[name], dtype=np.float32)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise ValidationError(f"{path}: bad checkpoint magic")
    off = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise ValidationError(f"{path}: truncated checkpoint")
        piece = blob[off:off + n]
        off += n
        return piece

    (count,) = struct.unpack("<I", take(4))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n_elem = int(np.prod(shape)) if rank else 1
        payload = take(4 * n_elem)
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        if name in params:
            raise ValidationError(f"{path}: duplicate parameter {name!r}")
        params[name] = arr
    if off != len(blob):
        raise ValidationError(f"{path}: {len(blob) - off} trailing bytes")
    return params


def params_checksum(params: dict[str, np.ndarray]) -> int:
    """Order-independent content hash, used to assert frozen weights."""
    import zlib

    acc = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype=np.float32)
        acc = zlib.crc32(name.encode("utf-8"), acc)
        acc = zlib.crc32(arr.tobytes(order="C"), acc)
    return acc
