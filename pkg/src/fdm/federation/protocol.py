"""Framed request/response protocol for the artifact registry.

Frame: magic "FDM1" | u8 message type | u32 little-endian payload length |
payload. One request and one response per connection.
"""

from __future__ import annotations

import socket
import struct

MAGIC = b"FDM1"

MSG_PUSH = 1
MSG_PULL = 2
MSG_LIST = 3
MSG_OK = 129
MSG_ERR = 130
MSG_DATA = 131

_VALID_TYPES = {MSG_PUSH, MSG_PULL, MSG_LIST, MSG_OK, MSG_ERR, MSG_DATA}
MAX_FRAME = 512 * 1024 * 1024


class ProtocolError(RuntimeError):
    pass


def pack_frame(msg_type: int, payload: bytes) -> bytes:
    if msg_type not in _VALID_TYPES:
        raise ProtocolError(f"invalid message type {msg_type}")
    return MAGIC + struct.pack("<BI", msg_type, len(payload)) + payload


def recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        part = sock.recv(min(n - got, 1 << 20))
        if not part:
            raise ProtocolError(f"connection closed after {got} of {n} bytes")
        chunks.append(part)
        got += len(part)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> tuple[int, bytes]:
    header = recv_exact(sock, 9)
    if header[:4] != MAGIC:
        raise ProtocolError("bad frame magic")
    msg_type, length = struct.unpack("<BI", header[4:9])
    if msg_type not in _VALID_TYPES:
        raise ProtocolError(f"unknown message type {msg_type}")
    if length > MAX_FRAME:
        raise ProtocolError(f"frame of {length} bytes exceeds limit")
    return msg_type, recv_exact(sock, length)


def send_frame(sock: socket.socket, msg_type: int, payload: bytes) -> None:
    sock.sendall(pack_frame(msg_type, payload))


def pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    if not raw or len(raw) > 0xFFFF:
        raise ProtocolError(f"bad artifact name {name!r}")
    return struct.pack("<H", len(raw)) + raw


def unpack_name(payload: bytes) -> tuple[str, bytes]:
    if len(payload) < 2:
        raise ProtocolError("payload too short for a name")
    (n,) = struct.unpack("<H", payload[:2])
    if len(payload) < 2 + n:
        raise ProtocolError("name length overruns payload")
    return payload[2 : 2 + n].decode("utf-8"), payload[2 + n :]
