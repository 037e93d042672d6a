"""VOL1 binary volume format.

Layout (little-endian throughout):

    magic   4 bytes  b"VOL1"
    ndim    u8
    extent  ndim * u32      voxel counts, slowest axis first (row-major)
    spacing ndim * f64      physical size per axis in mm (1.0 for non-spatial axes)
    scalar  u8              0 = f32, 1 = f64, 2 = u16
    payload extent-product scalars, row-major (C order)

Trivially parseable in any language; used for every on-disk image artifact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContractViolation

MAGIC = b"VOL1"

_SCALAR_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u2")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint16"): 2}


def write_vol1(path, data: np.ndarray, spacing) -> None:
    """Write an array with per-axis spacing metadata to *path*."""
    data = np.asarray(data)
    if data.dtype not in _DTYPE_CODES:
        raise ContractViolation(
            f"unsupported dtype {data.dtype}; use float32, float64, or uint16"
        )
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != data.ndim:
        raise ContractViolation(
            f"spacing has {len(spacing)} entries for {data.ndim}-d data"
        )
    code = _DTYPE_CODES[data.dtype]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", data.ndim))
        fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
        fh.write(struct.pack(f"<{data.ndim}d", *spacing))
        fh.write(struct.pack("<B", code))
        fh.write(np.ascontiguousarray(data).astype(_SCALAR_CODES[code]).tobytes())


def read_vol1(path) -> tuple[np.ndarray, tuple[float, ...]]:
    """Read a VOL1 file; returns (data, spacing)."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ContractViolation(f"{path}: not a VOL1 file (bad magic)")
    off = 4
    (ndim,) = struct.unpack_from("<B", raw, off)
    off += 1
    shape = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    spacing = struct.unpack_from(f"<{ndim}d", raw, off)
    off += 8 * ndim
    (code,) = struct.unpack_from("<B", raw, off)
    off += 1
    if code not in _SCALAR_CODES:
        raise ContractViolation(f"{path}: unknown scalar code {code}")
    dtype = _SCALAR_CODES[code]
    n = int(np.prod(shape)) if ndim else 1
    if len(raw) - off < n * dtype.itemsize:
        raise ContractViolation(f"{path}: payload shorter than the declared extents")
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=off).reshape(shape)
    return data.copy(), spacing
