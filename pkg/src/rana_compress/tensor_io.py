"""
Self-describing binary tensor files (``.rana``).

Layout, all little-endian::

    magic    4 bytes  b"RANA"
    version  u32      FORMAT_VERSION
    dtype    u32      0 = float64
    ndim     u32
    dims     ndim x u64
    payload  row-major float64 values
"""

import os
import tempfile
from pathlib import Path
from typing import Union

import numpy as np

from .errors import TensorFormatError

MAGIC = b"RANA"
FORMAT_VERSION = 1
DTYPE_CODES = {0: np.dtype("<f8")}

PathLike = Union[str, Path]


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array, dtype="<f8")
    header = np.array([FORMAT_VERSION, 0, array.ndim], dtype="<u4").tobytes()
    dims = np.array(array.shape, dtype="<u8").tobytes()
    return MAGIC + header + dims + array.tobytes(order="C")


def decode_tensor(data: bytes, path: str = "<bytes>") -> np.ndarray:
    if len(data) < 16:
        raise TensorFormatError(path, len(data), "truncated header")
    if data[:4] != MAGIC:
        raise TensorFormatError(path, 0, f"bad magic {data[:4]!r}")
    version, dtype_code, ndim = (int(v) for v in np.frombuffer(data, dtype="<u4", count=3, offset=4))
    if version != FORMAT_VERSION:
        raise TensorFormatError(path, 4, f"unsupported format version {version}")
    if dtype_code not in DTYPE_CODES:
        raise TensorFormatError(path, 8, f"unknown dtype code {dtype_code}")
    dims_end = 16 + 8 * ndim
    if len(data) < dims_end:
        raise TensorFormatError(path, len(data), "truncated dimension list")
    shape = tuple(int(v) for v in np.frombuffer(data, dtype="<u8", count=ndim, offset=16))
    dtype = DTYPE_CODES[dtype_code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = len(data) - dims_end
    if payload != expected:
        raise TensorFormatError(
            path, dims_end, f"payload holds {payload} bytes, dims require {expected}"
        )
    if expected == 0:
        return np.zeros(shape)
    values = np.frombuffer(data, dtype=dtype, offset=dims_end)
    return values.reshape(shape).astype(np.float64)


def read_tensor(path: PathLike) -> np.ndarray:
    path = str(path)
    with open(path, "rb") as f:
        data = f.read()
    return decode_tensor(data, path)


def atomic_write_bytes(path: PathLike, data: bytes):
    """Writes to a temporary file in the target directory, then renames it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def write_tensor(path: PathLike, array: np.ndarray):
    atomic_write_bytes(path, encode_tensor(array))
