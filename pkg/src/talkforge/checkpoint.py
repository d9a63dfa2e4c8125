"""Flat binary weight checkpoints.

Layout: magic ``b"TFORGE1"``, version u32, then one record per tensor:
name length (u32), UTF-8 name, rank (u32), extents (u32 each), float64
payload. All integers and floats little-endian. Records are written in
sorted name order so identical weights always produce identical bytes,
and a save/load round trip is bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor

MAGIC = b"TFORGE1"
VERSION = 1


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=np.float64)


def save_checkpoint(path, tensors: Mapping[str, "Tensor | np.ndarray"]) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(_as_array(tensors[name]), dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:len(MAGIC)]!r}")
    off = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = blob[off : off + n]
        off += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")

    out: dict[str, np.ndarray] = {}
    while off < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = take(8 * count)
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return out


def load_into(params: Mapping[str, Tensor], loaded: Mapping[str, np.ndarray]) -> None:
    """Assign loaded arrays into named parameter tensors, strictly by name."""
    missing = sorted(set(params) - set(loaded))
    extra = sorted(set(loaded) - set(params))
    if missing or extra:
        raise CheckpointError(f"checkpoint mismatch: missing={missing} extra={extra}")
    for name, tensor in params.items():
        arr = loaded[name]
        if arr.shape != tensor.data.shape:
            raise CheckpointError(
                f"checkpoint mismatch for {name}: file {arr.shape} vs model {tensor.data.shape}"
            )
        tensor.data = arr.astype(np.float64, copy=True)
