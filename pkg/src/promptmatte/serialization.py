"""Binary tensor files ("PMT1") and checkpoint directories.

File layout: magic bytes ``PMT1``, dtype code (u8: 0=float32, 1=float64),
rank (u8), one little-endian u64 per extent, then the raw little-endian
row-major payload.

A checkpoint is a directory holding one ``<parameter path>.pmt`` file per
tensor plus a ``manifest.json`` echoing the run configuration, step count
and seed.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"PMT1"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}


def save_tensor(path, array) -> None:
    """Write a float32/float64 numpy array (or Tensor) as a PMT1 file."""
    if isinstance(array, Tensor):
        array = array.data
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _DTYPE_CODES:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_tensor(path) -> np.ndarray:
    """Read a PMT1 file back into a numpy array."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a PMT1 file")
        code, rank = struct.unpack("<BB", fh.read(2))
        if code not in _CODE_DTYPES:
            raise ValueError(f"{path}: unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
        dtype = _CODE_DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = fh.read(count * dtype.itemsize)
        if len(payload) != count * dtype.itemsize:
            raise ValueError(f"{path}: truncated payload")
        arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype)
    return arr.reshape(shape)


def tensor_extents(path) -> tuple[int, ...]:
    """Read only the header of a PMT1 file and return its extents."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a PMT1 file")
        _, rank = struct.unpack("<BB", fh.read(2))
        return struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()


def save_checkpoint(ckpt_dir, params: dict[str, Tensor], manifest: dict) -> None:
    """Write all parameters keyed by path plus a manifest into a directory."""
    ckpt = Path(ckpt_dir)
    ckpt.mkdir(parents=True, exist_ok=True)
    for key in sorted(params):
        save_tensor(ckpt / f"{key}.pmt", params[key])
    with open(ckpt / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(ckpt_dir) -> tuple[dict[str, Tensor], dict]:
    """Load a checkpoint directory into (params, manifest).

    Parameters come back as requires_grad leaves, ready for training.
    """
    ckpt = Path(ckpt_dir)
    manifest_path = ckpt / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{ckpt}: no manifest.json; not a checkpoint directory")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    params: dict[str, Tensor] = {}
    for path in sorted(ckpt.glob("*.pmt")):
        key = path.name[:-len(".pmt")]
        params[key] = Tensor(load_tensor(path), requires_grad=True)
    return params, manifest
