"""Binary tensor files: magic "M3FT", version, dtype code, rank, u32 dims, payload.

All integers little-endian; dtype code 0 is the only defined code (float32).
Used for checkpoint segments and dataset payload sidecars.
"""

import struct
from pathlib import Path

import numpy as np

MAGIC = b"M3FT"
VERSION = 1
DTYPE_F32 = 0


class TensorFileError(ValueError):
    """Malformed or truncated tensor file."""


def write_tensor(path, arr: np.ndarray):
    arr = np.asarray(arr, dtype=np.float32)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    if arr.ndim > 255:
        raise TensorFileError(f"rank {arr.ndim} exceeds format limit")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BBB", VERSION, DTYPE_F32, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype("<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise TensorFileError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 7:
        raise TensorFileError(f"{path}: truncated header")
    version, dtype_code, rank = struct.unpack("<BBB", raw[4:7])
    if version != VERSION:
        raise TensorFileError(f"{path}: unsupported version {version}")
    if dtype_code != DTYPE_F32:
        raise TensorFileError(f"{path}: unsupported dtype code {dtype_code}")
    head = 7 + 4 * rank
    if len(raw) < head:
        raise TensorFileError(f"{path}: truncated dims")
    dims = struct.unpack(f"<{rank}I", raw[7:head])
    expected = head + 4 * int(np.prod(dims, dtype=np.int64))
    if len(raw) != expected:
        raise TensorFileError(
            f"{path}: expected {expected} bytes for shape {dims}, got {len(raw)}"
        )
    return np.frombuffer(raw[head:], dtype="<f4").reshape(dims).copy()
