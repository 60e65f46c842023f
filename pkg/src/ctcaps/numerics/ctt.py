"""CTT v1 binary tensor files.

Layout: ``b"CTT1"``, u8 rank, rank x u32 little-endian dims, then the
row-major float32 little-endian payload.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Union

import numpy as np

from ..errors import FormatError
from ..fileio import atomic_write_bytes
from .tensor import Tensor

MAGIC = b"CTT1"


def encode(array: Union[np.ndarray, Tensor]) -> bytes:
    if isinstance(array, Tensor):
        array = array.data
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim > 255:
        raise FormatError(f"rank {arr.ndim} does not fit in a CTT header")
    header = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def decode(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 5 or blob[:4] != MAGIC:
        raise FormatError(f"{source}: not a CTT v1 file (bad magic)")
    rank = blob[4]
    offset = 5 + 4 * rank
    if len(blob) < offset:
        raise FormatError(f"{source}: truncated header")
    shape = struct.unpack(f"<{rank}I", blob[5:offset])
    count = int(np.prod(shape)) if rank else 1
    expected = offset + 4 * count
    if len(blob) != expected:
        kind = "truncated payload" if len(blob) < expected else "trailing bytes"
        raise FormatError(f"{source}: {kind} ({len(blob)} bytes, expected {expected})")
    return np.frombuffer(blob, dtype="<f4", offset=offset).reshape(shape).astype(np.float32)


def save(path: Union[str, os.PathLike], array: Union[np.ndarray, Tensor]) -> None:
    atomic_write_bytes(path, encode(array))


def load(path: Union[str, os.PathLike]) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"{path}: file not found") from exc
    return decode(blob, str(path))
