"""Binary container for tensors crossing the edge/cloud split.

Layout (all integers little-endian)::

    b"FMRX"  magic
    u16      format version
    u8       dtype code (1 = float32)
    32 B     encoder fingerprint (sha256 digest)
    u16      tensor count
    per tensor: u8 name length, name (ascii), u8 ndim, u32 dims[ndim]
    payload: row-major float32 tensors in header order
"""
from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"FMRX"
VERSION = 1
DTYPES = {1: np.dtype("<f4")}
_FIXED = struct.Struct("<4sHB32sH")


class InterchangeError(ValueError):
    pass


def encode(tensors: "OrderedDict[str, np.ndarray] | dict[str, np.ndarray]",
           fingerprint: str) -> bytes:
    fp = bytes.fromhex(fingerprint)
    if len(fp) != 32:
        raise InterchangeError("fingerprint must be a sha256 hex digest")
    header = [_FIXED.pack(MAGIC, VERSION, 1, fp, len(tensors))]
    payload = []
    for name, arr in tensors.items():
        raw = name.encode("ascii")
        arr = np.ascontiguousarray(arr, dtype=DTYPES[1])
        header.append(struct.pack(f"<B{len(raw)}sB{arr.ndim}I", len(raw), raw, arr.ndim, *arr.shape))
        payload.append(arr.tobytes())
    return b"".join(header + payload)


def decode(data: bytes) -> tuple["OrderedDict[str, np.ndarray]", str]:
    """Return ``(tensors, fingerprint)``; raises :class:`InterchangeError` on any defect."""
    if len(data) < _FIXED.size:
        raise InterchangeError("truncated interchange header")
    magic, version, dtype_code, fp, count = _FIXED.unpack_from(data, 0)
    if magic != MAGIC:
        raise InterchangeError(f"bad magic {magic!r}")
    if version != VERSION:
        raise InterchangeError(f"unsupported interchange version {version}")
    if dtype_code not in DTYPES:
        raise InterchangeError(f"unknown dtype code {dtype_code}")
    dtype = DTYPES[dtype_code]
    off = _FIXED.size
    specs = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<B", data, off)
            name = data[off + 1:off + 1 + n].decode("ascii")
            off += 1 + n
            (ndim,) = struct.unpack_from("<B", data, off)
            shape = struct.unpack_from(f"<{ndim}I", data, off + 1)
            off += 1 + 4 * ndim
            specs.append((name, shape))
    except (struct.error, UnicodeDecodeError) as exc:
        raise InterchangeError(f"truncated or corrupt interchange header: {exc}") from None
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, shape in specs:
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if off + nbytes > len(data):
            raise InterchangeError(f"truncated payload while reading {name!r}")
        tensors[name] = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize,
                                      offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(data):
        raise InterchangeError(f"{len(data) - off} trailing bytes after payload")
    return tensors, fp.hex()
