"""Binary weight-file format ("ADWT").

Layout, all integers little-endian:

    magic   4 bytes  b"ADWT"
    version u8       1
    count   u32      number of records
    record: u16 name length, UTF-8 name, u8 dtype (0 = f32, 1 = u32),
            u32 ndim, u32 dims[ndim], payload row-major

dtype 1 exists for permutation index arrays; everything else is f32.
Readers validate the whole file before returning, so a failed read never
leaves partial state behind.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import FormatError

MAGIC = b"ADWT"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<u4")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("uint32"): 1}


def write_weights(path, records: list[tuple[str, np.ndarray]]) -> None:
    """Write named arrays atomically (temp file + rename)."""
    path = os.fspath(path)
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<BI", VERSION, len(records))
    for name, arr in records:
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise FormatError(f"record {name!r}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("<BI", code, arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr).astype(_DTYPES[code], copy=False).tobytes()
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".",
                               prefix=os.path.basename(path) + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(buf)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError(f"{self.path}: truncated while reading {what}")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_weights(path) -> dict[str, np.ndarray]:
    """Read every record into an ordered name -> array mapping."""
    path = os.fspath(path)
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data, path)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic, not an ADWT file")
    (version, count) = r.unpack("<BI", "header")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = r.unpack("<H", f"record {i} name length")
        name = r.take(nlen, f"record {i} name").decode("utf-8")
        (code, ndim) = r.unpack("<BI", f"record {name!r} header")
        if code not in _DTYPES:
            raise FormatError(f"{path}: record {name!r} has unknown dtype {code}")
        dims = r.unpack(f"<{ndim}I", f"record {name!r} dims")
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        payload = r.take(size * 4, f"record {name!r} payload")
        arr = np.frombuffer(payload, dtype=_DTYPES[code]).reshape(dims)
        out[name] = arr.astype(np.float32 if code == 0 else np.uint32)
    if r.off != len(data):
        raise FormatError(f"{path}: {len(data) - r.off} trailing bytes after "
                          f"last record")
    return out
