"""Binary tensor container shared by all modules.

Layout: magic ``CIMT``, version u8 = 1, dtype u8 (0 = int8, 1 = int32,
2 = float64), rank u8, dims as u32 little-endian, scale as float64
little-endian, then the raw row-major payload.  Callers may append extra
header fields (e.g. LUT metadata) between the scale and the payload; the
reader returns them alongside the array so the file stays self-describing
for the module that owns it.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"CIMT"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.int8): 0, np.dtype(np.int32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {0: np.dtype("<i1"), 1: np.dtype("<i4"), 2: np.dtype("<f8")}

# extension field id -> struct format (little-endian)
_EXT_FORMATS = {
    "input_scale": ("f", "<d"),
    "z_quant_max": ("z", "<b"),
    "partition": ("p", "<I"),
    "bank": ("b", "<I"),
    "index_bits": ("k", "<I"),
    "fraction_bits": ("q", "<I"),
}
_EXT_BY_TAG = {tag: (name, fmt) for name, (tag, fmt) in _EXT_FORMATS.items()}


class ContainerError(ValueError):
    """Malformed or unsupported container file."""


def write_tensor(path, array, scale=1.0, extra=None):
    """Serialize ``array`` (int8/int32/float64) with its scale to ``path``."""
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _DTYPE_CODES:
        raise ContainerError(f"unsupported dtype {arr.dtype}")
    extra = dict(extra or {})
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BBB", VERSION, _DTYPE_CODES[arr.dtype], arr.ndim))
        for dim in arr.shape:
            fh.write(struct.pack("<I", dim))
        fh.write(struct.pack("<d", float(scale)))
        fh.write(struct.pack("<B", len(extra)))
        for name, value in sorted(extra.items()):
            if name not in _EXT_FORMATS:
                raise ContainerError(f"unknown extension field {name!r}")
            tag, fmt = _EXT_FORMATS[name]
            fh.write(tag.encode("ascii"))
            fh.write(struct.pack(fmt, value))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path):
    """Load a container file; returns ``(array, scale, extra_fields)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {data[:4]!r}")
    version, dtype_code, rank = struct.unpack_from("<BBB", data, 4)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    if dtype_code not in _CODE_DTYPES:
        raise ContainerError(f"{path}: unknown dtype code {dtype_code}")
    off = 7
    dims = []
    for _ in range(rank):
        (dim,) = struct.unpack_from("<I", data, off)
        dims.append(dim)
        off += 4
    (scale,) = struct.unpack_from("<d", data, off)
    off += 8
    (n_extra,) = struct.unpack_from("<B", data, off)
    off += 1
    extra = {}
    for _ in range(n_extra):
        tag = data[off : off + 1].decode("ascii")
        off += 1
        if tag not in _EXT_BY_TAG:
            raise ContainerError(f"{path}: unknown extension tag {tag!r}")
        name, fmt = _EXT_BY_TAG[tag]
        (value,) = struct.unpack_from(fmt, data, off)
        off += struct.calcsize(fmt)
        extra[name] = value
    dtype = _CODE_DTYPES[dtype_code]
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    payload = data[off:]
    expected = count * dtype.itemsize
    if len(payload) != expected:
        raise ContainerError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.copy(), scale, extra
