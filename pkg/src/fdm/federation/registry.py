"""File-store-backed artifact registry service.

Artifacts land in the store via write-to-temp + atomic rename, so a crashed
or interrupted push never leaves a partial artifact visible, and the index
can always be rebuilt by re-scanning the directory.
"""

from __future__ import annotations

import re
import socketserver
import sys
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from . import protocol as proto
from .artifact import ArtifactError, parse_artifact

ARTIFACT_SUFFIX = ".fdma"
_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]{0,127}$")


@dataclass
class IndexEntry:
    metadata: dict[str, str]
    length: int
    checksum: int  # CRC32 of the artifact bytes


@dataclass
class RegistryIndex:
    entries: dict[str, IndexEntry] = field(default_factory=dict)
    version: int = 0

    def put(self, name: str, entry: IndexEntry) -> None:
        self.entries[name] = entry
        self.version += 1

    def listing(self) -> str:
        lines = [
            f"{name}\t{e.length}\t{e.checksum:08x}"
            for name, e in sorted(self.entries.items())
        ]
        return "\n".join(lines)


def valid_name(name: str) -> bool:
    return bool(_NAME_RE.match(name))


def scan_store(store: Path) -> RegistryIndex:
    index = RegistryIndex()
    for path in sorted(store.glob(f"*{ARTIFACT_SUFFIX}")):
        data = path.read_bytes()
        try:
            art = parse_artifact(data)
        except ArtifactError as err:
            print(f"registry: ignoring {path.name}: {err}", file=sys.stderr)
            continue
        index.put(
            path.name[: -len(ARTIFACT_SUFFIX)],
            IndexEntry(dict(art.metadata), len(data), zlib.crc32(data)),
        )
    return index


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        reg: RegistryServer = self.server.registry  # type: ignore[attr-defined]
        try:
            msg_type, payload = proto.read_frame(self.request)
        except proto.ProtocolError:
            return  # interrupted or garbled request: no mutation, no reply
        try:
            if msg_type == proto.MSG_PUSH:
                name, art_bytes = proto.unpack_name(payload)
                reg.store_artifact(name, art_bytes)
                proto.send_frame(self.request, proto.MSG_OK, b"stored " + name.encode())
            elif msg_type == proto.MSG_PULL:
                name, _ = proto.unpack_name(payload)
                data = reg.fetch_artifact(name)
                proto.send_frame(self.request, proto.MSG_DATA, data)
            elif msg_type == proto.MSG_LIST:
                with reg.lock:
                    listing = reg.index.listing()
                proto.send_frame(self.request, proto.MSG_OK, listing.encode("utf-8"))
            else:
                proto.send_frame(self.request, proto.MSG_ERR, b"unexpected message type")
        except KeyError as err:
            proto.send_frame(self.request, proto.MSG_ERR, f"not found: {err.args[0]}".encode())
        except (ArtifactError, proto.ProtocolError, OSError, ValueError) as err:
            try:
                proto.send_frame(self.request, proto.MSG_ERR, str(err).encode("utf-8"))
            except OSError:
                pass


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class RegistryServer:
    """Push/pull/list service over the framed protocol."""

    def __init__(self, address: tuple[str, int], store_dir: str | Path):
        self.store = Path(store_dir)
        self.store.mkdir(parents=True, exist_ok=True)
        probe = self.store / ".write-probe"
        try:
            probe.write_bytes(b"")
            probe.unlink()
        except OSError as err:
            raise RuntimeError(f"store directory not writable: {err}") from err
        self.lock = threading.Lock()
        self.index = scan_store(self.store)
        self._server = _Server(address, _Handler)
        self._server.registry = self  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        host, port = self._server.server_address[:2]
        return str(host), int(port)

    def store_artifact(self, name: str, data: bytes) -> None:
        if not valid_name(name):
            raise ValueError(f"invalid artifact name {name!r}")
        art = parse_artifact(data)  # reject corrupt transfers before commit
        with self.lock:
            final = self.store / f"{name}{ARTIFACT_SUFFIX}"
            tmp = self.store / f".{name}.tmp"
            tmp.write_bytes(data)
            tmp.replace(final)
            self.index.put(
                name, IndexEntry(dict(art.metadata), len(data), zlib.crc32(data))
            )

    def fetch_artifact(self, name: str) -> bytes:
        if not valid_name(name):
            raise ValueError(f"invalid artifact name {name!r}")
        with self.lock:
            if name not in self.index.entries:
                raise KeyError(name)
            expected = self.index.entries[name].checksum
        data = (self.store / f"{name}{ARTIFACT_SUFFIX}").read_bytes()
        if zlib.crc32(data) != expected:
            raise ArtifactError(f"stored artifact {name!r} failed its checksum")
        return data

    def start(self) -> "RegistryServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def __enter__(self) -> "RegistryServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def serve_registry(address: tuple[str, int], store_dir: str | Path) -> RegistryServer:
    """Bind and start a registry; returns the running service handle."""
    return RegistryServer(address, store_dir).start()
