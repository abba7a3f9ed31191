# scripts/tensorfile.py
"""
Binary tensor files.

  offset 0   4 bytes   magic "CELP"
  offset 4   u32       version (1)
  offset 8   u8        dtype: 0 = f32, 1 = f64, 2 = u8
  offset 9   u8        ndim
  offset 10  ndim x u64 extents
  then       little-endian row-major payload
"""
import struct
from pathlib import Path
from typing import Union

import numpy as np
import torch

from .errors import TensorFormatError, UnsupportedDtypeError

MAGIC = b"CELP"
VERSION = 1
_HEAD = struct.Struct("<4sIBB")

DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_TORCH_CODES = {torch.float32: 0, torch.float64: 1, torch.uint8: 2}


def encode_tensor(t: torch.Tensor) -> bytes:
    if t.dtype not in _TORCH_CODES:
        raise UnsupportedDtypeError(f"cannot store dtype {t.dtype}; supported: float32, float64, uint8")
    code = _TORCH_CODES[t.dtype]
    arr = t.detach().cpu().contiguous().numpy().astype(DTYPES[code], copy=False)
    head = _HEAD.pack(MAGIC, VERSION, code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def decode_tensor(raw: bytes) -> torch.Tensor:
    if len(raw) < _HEAD.size:
        raise TensorFormatError(f"header needs {_HEAD.size} bytes, file has {len(raw)}", offset=len(raw))
    magic, version, code, ndim = _HEAD.unpack_from(raw, 0)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}", offset=4)
    if code not in DTYPES:
        raise UnsupportedDtypeError(f"unsupported dtype byte {code}", offset=8)
    ext_end = _HEAD.size + 8 * ndim
    if len(raw) < ext_end:
        raise TensorFormatError(f"extents need {ext_end} bytes, file has {len(raw)}", offset=len(raw))
    shape = struct.unpack_from(f"<{ndim}Q", raw, _HEAD.size)
    dtype = DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    actual = len(raw) - ext_end
    if actual != expected:
        raise TensorFormatError(f"payload: expected {expected} bytes, found {actual}", offset=ext_end)
    if expected == 0:
        return torch.from_numpy(np.zeros(shape, dtype=dtype.newbyteorder("=")))
    arr = np.frombuffer(raw, dtype=dtype, offset=ext_end).reshape(shape)
    return torch.from_numpy(arr.astype(dtype.newbyteorder("="), copy=True))


def write_tensor_file(path: Union[str, Path], t: torch.Tensor) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(encode_tensor(t))
    return p


def read_tensor_file(path: Union[str, Path]) -> torch.Tensor:
    return decode_tensor(Path(path).read_bytes())
