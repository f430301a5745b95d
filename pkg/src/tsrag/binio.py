"""Little-endian binary framing for checkpoints and knowledge-base files.

Every artifact starts with a 4-byte magic and a ``u32`` version. Payload
fields are written in a fixed order: unsigned ints, doubles, length-prefixed
UTF-8 strings and f64 arrays prefixed by their rank and shape.
"""

from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, IOFailure


class Writer:
    def __init__(self, magic: bytes, version: int):
        if len(magic) != 4:
            raise ValueError("magic must be exactly 4 bytes")
        self._buf = io.BytesIO()
        self._buf.write(magic)
        self.u32(version)

    def u32(self, value: int) -> None:
        self._buf.write(struct.pack("<I", int(value)))

    def u64(self, value: int) -> None:
        self._buf.write(struct.pack("<Q", int(value)))

    def f64(self, value: float) -> None:
        self._buf.write(struct.pack("<d", float(value)))

    def string(self, value: str) -> None:
        raw = value.encode("utf-8")
        self.u32(len(raw))
        self._buf.write(raw)

    def array(self, arr: np.ndarray) -> None:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        self.u32(arr.ndim)
        for n in arr.shape:
            self.u64(n)
        self._buf.write(arr.tobytes(order="C"))

    def getvalue(self) -> bytes:
        return self._buf.getvalue()


class Reader:
    """Cursor over an artifact's bytes; every short read is a FormatError."""

    def __init__(self, data: bytes, magic: bytes, version: int, what: str = "artifact"):
        self._data = data
        self._pos = 0
        self.what = what
        head = self._take(4)
        if head != magic:
            raise FormatError(f"{what}: bad magic {head!r}, expected {magic!r}")
        found = self.u32()
        if found != version:
            raise FormatError(f"{what}: unsupported version {found}, expected {version}")

    def _take(self, n: int) -> bytes:
        end = self._pos + n
        if end > len(self._data):
            raise FormatError(f"{self.what}: truncated file (wanted {n} bytes at offset {self._pos})")
        chunk = self._data[self._pos:end]
        self._pos = end
        return chunk

    @property
    def remaining(self) -> int:
        return len(self._data) - self._pos

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def string(self) -> str:
        n = self.u32()
        try:
            return self._take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.what}: corrupt string field") from exc

    def array(self) -> np.ndarray:
        ndim = self.u32()
        if ndim > 8:
            raise FormatError(f"{self.what}: implausible array rank {ndim}")
        shape = tuple(self.u64() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        raw = self._take(8 * count)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)

    def finish(self) -> None:
        if self._pos != len(self._data):
            raise FormatError(f"{self.what}: {len(self._data) - self._pos} trailing bytes")


def write_bytes(path, data: bytes) -> None:
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]
