"""Binary weight stream codec.

Layout (all integers little-endian):
    magic "FDMW" | u8 version=1 | u32 entry count
    per entry: u16 path length | path UTF-8 | u8 rank | u32 dim * rank |
               raw float32 payload
    u32 CRC32 over every preceding byte

decode(encode(tree)) reproduces the tree bit-exactly, including path order
(ParamTree iterates lexicographically, which the stream preserves).
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .engine import Tensor
from .params import ParamTree

MAGIC = b"FDMW"
VERSION = 1


class CodecError(ValueError):
    """Framing or checksum failure; .offset is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def encode_weights(params: ParamTree) -> bytes:
    chunks = [MAGIC, struct.pack("<BI", VERSION, len(params))]
    for path, t in params.items():
        raw = path.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"path too long: {path!r}")
        data = np.ascontiguousarray(t.data, dtype="<f4")
        rank = data.ndim
        if rank > 0xFF:
            raise ValueError(f"rank too large at {path!r}")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", rank))
        chunks.append(struct.pack(f"<{rank}I", *data.shape))
        chunks.append(data.tobytes())
    body = b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CodecError(f"truncated stream while reading {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def decode_weights(data: bytes) -> ParamTree:
    if len(data) < 13:
        raise CodecError("stream shorter than minimal header", len(data))
    stored_crc = struct.unpack("<I", data[-4:])[0]
    actual_crc = zlib.crc32(data[:-4])
    if stored_crc != actual_crc:
        raise CodecError(
            f"checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}",
            len(data) - 4,
        )
    r = _Reader(data[:-4])
    if r.take(4, "magic") != MAGIC:
        raise CodecError("bad magic, not a weight stream", 0)
    version, count = struct.unpack("<BI", r.take(5, "header"))
    if version != VERSION:
        raise CodecError(f"unsupported version {version}", 4)
    tree = ParamTree()
    order: list[str] = []
    for _ in range(count):
        (plen,) = struct.unpack("<H", r.take(2, "path length"))
        path = r.take(plen, "path").decode("utf-8")
        (rank,) = struct.unpack("<B", r.take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
        n = int(np.prod(dims)) if rank else 1
        payload = r.take(4 * n, f"payload of {path!r}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        if path in tree:
            raise CodecError(f"duplicate path {path!r}", r.pos)
        tree[path] = Tensor(arr)
        order.append(path)
    if r.pos != len(r.buf):
        raise CodecError("trailing bytes after last entry", r.pos)
    if order != sorted(order):
        raise CodecError("entries not in lexicographic path order", 9)
    return tree


def expected_stream_length(shapes: dict[str, tuple]) -> int:
    """Byte length encode_weights would produce for the given shapes."""
    n = 4 + 5  # magic + version/count
    for path in sorted(shapes):
        dims = shapes[path]
        n += 2 + len(path.encode("utf-8")) + 1 + 4 * len(dims)
        n += 4 * int(np.prod(dims)) if dims else 4
    return n + 4
