"""Named-tensor container format and atomic file writes.

One flat binary layout is used for encoder weights, feature caches and
pyramid parameters:

    magic   8 bytes  b"SFMTNSR1"
    version u32      currently 1
    hlen    u32      length of the UTF-8 JSON header that follows
    header  bytes    arbitrary JSON metadata (spec fields etc.)
    count   u32      number of tensors
    per tensor:
        nlen  u32, name UTF-8
        dtype u8   (0=float32, 1=float64, 2=int64)
        ndim  u8
        shape u32 * ndim
        data  raw little-endian bytes, C order

All integers are little-endian. Truncated or corrupt files raise
ValidationError without returning a partial result.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import ValidationError

MAGIC = b"SFMTNSR1"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write payload to path via a temp file + rename in one directory."""
    d = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_tensors(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    """Serialize header metadata plus named tensors to bytes."""
    hj = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(hj)), hj,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise ValidationError(f"unsupported tensor dtype {arr.dtype} for {name!r}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


def save_tensors(path: str, header: dict, tensors: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, dump_tensors(header, tensors))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise ValidationError("truncated tensor file")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]


def parse_tensors(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(buf)
    if r.take(8) != MAGIC:
        raise ValidationError("not a statflow tensor file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise ValidationError(f"unsupported tensor file version {version}")
    header = json.loads(r.take(r.u32()).decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        code, ndim = r.u8(), r.u8()
        if code not in _DTYPES:
            raise ValidationError(f"unknown dtype code {code} in tensor {name!r}")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = r.take(n * dt.itemsize)
        tensors[name] = np.frombuffer(data, dtype=dt).reshape(shape).copy()
    if r.off != len(buf):
        raise ValidationError("trailing bytes in tensor file")
    return header, tensors


def load_tensors(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except FileNotFoundError:
        raise FileNotFoundError(f"tensor file not found: {path}")
    return parse_tensors(buf)
