"""Little-endian binary readers/writers with CRC32 trailers.

Shared by the checkpoint format (magic SSLDESC1) and the pair-archive
format (magic SSLPAIR1). Every multi-byte value is little-endian; each
file ends with a CRC32 (u32) of all preceding bytes.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import FormatError


class ByteWriter:
    """Accumulates little-endian fields; finish() appends the CRC32."""

    def __init__(self):
        self._buf = bytearray()

    def raw(self, data: bytes) -> None:
        self._buf += data

    def u32(self, value: int) -> None:
        self._buf += struct.pack("<I", int(value))

    def f32s(self, arr: np.ndarray) -> None:
        self._buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()

    def f64s(self, arr: np.ndarray) -> None:
        self._buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()

    def finish(self) -> bytes:
        crc = zlib.crc32(bytes(self._buf)) & 0xFFFFFFFF
        return bytes(self._buf) + struct.pack("<I", crc)


class ByteReader:
    """Sequential reader that reports the byte offset of any corruption."""

    def __init__(self, data: bytes, source: str = "<bytes>"):
        self._data = data
        self._pos = 0
        self._source = source

    @property
    def offset(self) -> int:
        return self._pos

    def raw(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise FormatError(
                f"{self._source}: truncated at byte {self._pos} "
                f"(needed {n} more, have {len(self._data) - self._pos})")
        out = self._data[self._pos:self._pos + n]
        self._pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.raw(4))[0]

    def f32s(self, count: int) -> np.ndarray:
        return np.frombuffer(self.raw(4 * count), dtype="<f4").astype(np.float32)

    def f64s(self, count: int) -> np.ndarray:
        return np.frombuffer(self.raw(8 * count), dtype="<f8").astype(np.float64)

    def check_crc(self) -> None:
        """Verify the trailing CRC32 covers everything read so far."""
        body_end = self._pos
        stored = self.u32()
        actual = zlib.crc32(self._data[:body_end]) & 0xFFFFFFFF
        if stored != actual:
            raise FormatError(
                f"{self._source}: CRC mismatch at byte {body_end} "
                f"(stored {stored:#010x}, computed {actual:#010x})")
        if self._pos != len(self._data):
            raise FormatError(
                f"{self._source}: {len(self._data) - self._pos} trailing "
                f"bytes after CRC at byte {self._pos}")
