"""
Little-endian record encoding shared by the FBAG1, MILCKPT1 and ATTR1 formats.

Files end with a CRC32 of every preceding byte when ``with_crc`` is set.
Fields are parsed before the checksum is checked, so a truncated file is
reported at the offset where data ran out rather than as a checksum failure.
"""

import struct
import zlib
from typing import List, Tuple

import numpy as np

from errors import ChecksumError, FormatError


class RecordWriter:
    """Accumulates little-endian fields into one byte string."""

    def __init__(self):
        self._parts: List[bytes] = []

    def raw(self, data: bytes) -> "RecordWriter":
        self._parts.append(bytes(data))
        return self

    def pack(self, fmt: str, *values) -> "RecordWriter":
        return self.raw(struct.pack("<" + fmt, *values))

    def text(self, value: str) -> "RecordWriter":
        encoded = value.encode("utf-8")
        return self.pack("I", len(encoded)).raw(encoded)

    def array(self, values, dtype: str) -> "RecordWriter":
        return self.raw(np.ascontiguousarray(values, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())

    def getvalue(self, with_crc: bool = True) -> bytes:
        body = b"".join(self._parts)
        if with_crc:
            body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
        return body


class RecordReader:
    """Reads fields sequentially; every failure names the byte offset."""

    def __init__(self, data: bytes, name: str, with_crc: bool = True):
        self.data = bytes(data)
        self.name = name
        self.with_crc = with_crc
        self.offset = 0
        self.limit = max(0, len(self.data) - 4) if with_crc else len(self.data)

    def take(self, count: int, what: str) -> bytes:
        if count < 0 or self.offset + count > self.limit:
            raise FormatError(f"{self.name}: truncated while reading {what}", self.offset)
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def magic(self, expected: bytes):
        start = self.offset
        if self.data[start:start + len(expected)] != expected:
            raise FormatError(f"{self.name}: bad magic, expected {expected!r}", start)
        self.take(len(expected), "magic")

    def unpack(self, fmt: str, what: str) -> Tuple:
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def text(self, what: str) -> str:
        (length,) = self.unpack("I", f"{what} length")
        start = self.offset
        raw = self.take(length, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{self.name}: {what} is not valid UTF-8", start)

    def array(self, dtype: str, shape: Tuple[int, ...], what: str) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(count * dt.itemsize, what)
        return np.frombuffer(raw, dtype=dt).astype(np.dtype(dtype)).reshape(shape)

    def finish(self):
        """Require that only the checksum remains, then verify it."""
        if self.offset != self.limit:
            raise FormatError(f"{self.name}: {self.limit - self.offset} unexpected trailing bytes", self.offset)
        if not self.with_crc:
            return
        if len(self.data) < 4:
            raise FormatError(f"{self.name}: truncated before checksum", len(self.data))
        (stored,) = struct.unpack("<I", self.data[self.limit:])
        if zlib.crc32(self.data[:self.limit]) & 0xFFFFFFFF != stored:
            raise ChecksumError(f"{self.name}: CRC32 mismatch", self.limit)
