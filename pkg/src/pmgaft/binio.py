"""Little-endian record reader/writer shared by the checkpoint and tensor-archive formats.

Both formats end with a CRC32 (u32) of every preceding byte so single-byte
payload corruption is detected.
"""
import struct
import zlib

import numpy as np

from .errors import CorruptionError, FormatError

FORMAT_VERSION = 1


class Writer:
    def __init__(self, magic: bytes):
        self.parts = [magic, struct.pack("<I", FORMAT_VERSION)]

    def u8(self, v):
        self.parts.append(struct.pack("<B", v))

    def u32(self, v):
        self.parts.append(struct.pack("<I", v))

    def name(self, s):
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.parts.append(raw)

    def shape(self, dims):
        self.u32(len(dims))
        for d in dims:
            self.u32(d)

    def payload(self, arr, dtype):
        self.parts.append(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())

    def getvalue(self) -> bytes:
        body = b"".join(self.parts)
        return body + struct.pack("<I", zlib.crc32(body))


class Reader:
    def __init__(self, data: bytes, magic: bytes):
        if len(data) == 0:
            raise FormatError("file is empty")
        if len(data) < len(magic) + 8:
            raise CorruptionError("file too short for header", offset=len(data))
        if data[:len(magic)] != magic:
            raise FormatError(f"bad magic {data[:len(magic)]!r}, expected {magic!r}")
        self.data = data
        self.end = len(data) - 4
        self.pos = len(magic)
        version = self.u32()
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported format version {version}")

    def _take(self, n):
        if self.pos + n > self.end:
            raise CorruptionError(f"truncated record: need {n} bytes", offset=self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self):
        return struct.unpack("<B", self._take(1))[0]

    def u32(self):
        return struct.unpack("<I", self._take(4))[0]

    def name(self):
        n = self.u32()
        raw = self._take(n)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptionError("segment name is not valid utf-8", offset=self.pos - n) from None

    def shape(self):
        rank = self.u32()
        if rank > 8:
            raise CorruptionError(f"implausible tensor rank {rank}", offset=self.pos - 4)
        return tuple(self.u32() for _ in range(rank))

    def payload(self, dims, dtype):
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        dt = np.dtype(dtype).newbyteorder("<")
        raw = self._take(count * dt.itemsize)
        return np.frombuffer(raw, dtype=dt).astype(np.dtype(dtype)).reshape(dims)

    def finish(self):
        if self.pos != self.end:
            raise CorruptionError("trailing bytes after last record", offset=self.pos)
        stored = struct.unpack("<I", self.data[self.end:])[0]
        if stored != zlib.crc32(self.data[:self.end]):
            raise CorruptionError("checksum mismatch", offset=self.end)
