"""Blocking client calls for the registry protocol."""

from __future__ import annotations

import socket
import zlib

from . import protocol as proto
from .artifact import parse_artifact


class RegistryError(RuntimeError):
    pass


class NotFoundError(RegistryError):
    pass


class TransferError(RegistryError):
    pass


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must be host:port, got {text!r}")
    return host, int(port)


def _roundtrip(address: tuple[str, int], msg_type: int, payload: bytes,
               timeout: float) -> tuple[int, bytes]:
    with socket.create_connection(address, timeout=timeout) as sock:
        proto.send_frame(sock, msg_type, payload)
        return proto.read_frame(sock)


def push_artifact(address: tuple[str, int], artifact_bytes: bytes,
                  name: str | None = None, timeout: float = 30.0) -> str:
    """Upload an artifact; returns the stored name."""
    if name is None:
        name = parse_artifact(artifact_bytes).name
    reply, payload = _roundtrip(
        address, proto.MSG_PUSH, proto.pack_name(name) + artifact_bytes, timeout
    )
    if reply != proto.MSG_OK:
        raise TransferError(f"push rejected: {payload.decode('utf-8', 'replace')}")
    return name


def pull_artifact(address: tuple[str, int], name: str, timeout: float = 30.0) -> bytes:
    """Download an artifact; the checksum is verified before returning."""
    reply, payload = _roundtrip(address, proto.MSG_PULL, proto.pack_name(name), timeout)
    if reply == proto.MSG_ERR:
        text = payload.decode("utf-8", "replace")
        if text.startswith("not found"):
            raise NotFoundError(text)
        raise TransferError(f"pull failed: {text}")
    if reply != proto.MSG_DATA:
        raise TransferError(f"unexpected reply type {reply}")
    art = parse_artifact(payload)  # raises CorruptArtifactError on bad CRC
    assert art is not None
    return payload


def list_artifacts(address: tuple[str, int], timeout: float = 30.0) -> list[tuple[str, int, int]]:
    """Registry listing as (name, byte length, crc32) tuples."""
    reply, payload = _roundtrip(address, proto.MSG_LIST, b"", timeout)
    if reply != proto.MSG_OK:
        raise TransferError(f"list failed: {payload.decode('utf-8', 'replace')}")
    out = []
    for line in payload.decode("utf-8").splitlines():
        if line:
            name, length, crc = line.split("\t")
            out.append((name, int(length), int(crc, 16)))
    return out


def verify_crc(data: bytes) -> int:
    return zlib.crc32(data)
