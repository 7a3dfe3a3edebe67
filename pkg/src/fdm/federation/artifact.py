"""Shareable model artifacts: weights plus bounded text metadata, never data.

Binary layout (little-endian):
    magic "FDMA" | u8 version=1 | u8 kind (1=diffusion, 2=segmentation) |
    u32 metadata length | metadata UTF-8 "key=value" lines |
    u32 payload length | weight stream (nn codec format) |
    u32 CRC32 over all preceding bytes
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

from ..nn.codec import decode_weights, encode_weights
from ..nn.params import ParamTree

MAGIC = b"FDMA"
VERSION = 1
METADATA_CAP = 16 * 1024  # hard privacy bound on the metadata section

KIND_CODES = {"diffusion": 1, "segmentation": 2}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}

REQUIRED_KEYS = ("name", "origin", "arch", "config_digest", "created")
DIFFUSION_KEYS = ("T", "beta_min", "beta_max")
ALLOWED_KEYS = frozenset(REQUIRED_KEYS) | frozenset(DIFFUSION_KEYS)


class ArtifactError(ValueError):
    pass


class CorruptArtifactError(ArtifactError):
    pass


class IncompatibleArchitectureError(ArtifactError):
    pass


@dataclass(frozen=True)
class ModelArtifact:
    kind: str  # "diffusion" | "segmentation"
    metadata: dict[str, str]
    payload: bytes

    @property
    def name(self) -> str:
        return self.metadata["name"]

    @property
    def arch(self) -> str:
        return self.metadata["arch"]


def _encode_metadata(metadata: dict[str, str]) -> bytes:
    lines = []
    for key in sorted(metadata):
        value = str(metadata[key])
        if "=" in key or "\n" in key or "\n" in value:
            raise ArtifactError(f"metadata key/value may not contain '=' or newline: {key!r}")
        lines.append(f"{key}={value}")
    return "\n".join(lines).encode("utf-8")


def _decode_metadata(blob: bytes) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in blob.decode("utf-8").splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key:
            raise ArtifactError(f"malformed metadata line {line!r}")
        out[key] = value
    return out


def export_artifact(params: ParamTree, kind: str, metadata: dict[str, str]) -> bytes:
    """Serialize (weights, metadata) into artifact bytes."""
    if kind not in KIND_CODES:
        raise ArtifactError(f"unknown artifact kind {kind!r}")
    missing = [k for k in REQUIRED_KEYS if k not in metadata]
    if kind == "diffusion":
        missing += [k for k in DIFFUSION_KEYS if k not in metadata]
    if missing:
        raise ArtifactError(f"metadata missing required keys: {missing}")
    meta_blob = _encode_metadata(metadata)
    if len(meta_blob) > METADATA_CAP:
        raise ArtifactError(
            f"metadata section is {len(meta_blob)} bytes, cap is {METADATA_CAP}"
        )
    payload = encode_weights(params)
    body = b"".join(
        (
            MAGIC,
            struct.pack("<BB", VERSION, KIND_CODES[kind]),
            struct.pack("<I", len(meta_blob)),
            meta_blob,
            struct.pack("<I", len(payload)),
            payload,
        )
    )
    return body + struct.pack("<I", zlib.crc32(body))


def parse_artifact(data: bytes) -> ModelArtifact:
    """Split artifact bytes into sections, verifying framing and checksum."""
    if len(data) < 18:
        raise CorruptArtifactError("artifact shorter than minimal frame")
    if data[:4] != MAGIC:
        raise CorruptArtifactError("bad magic, not a model artifact")
    stored = struct.unpack("<I", data[-4:])[0]
    actual = zlib.crc32(data[:-4])
    if stored != actual:
        raise CorruptArtifactError(
            f"artifact checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"
        )
    version, kind_code = struct.unpack("<BB", data[4:6])
    if version != VERSION:
        raise CorruptArtifactError(f"unsupported artifact version {version}")
    if kind_code not in KIND_NAMES:
        raise CorruptArtifactError(f"unknown artifact kind code {kind_code}")
    (meta_len,) = struct.unpack("<I", data[6:10])
    pos = 10
    if pos + meta_len + 4 > len(data) - 4:
        raise CorruptArtifactError("metadata length overruns the artifact")
    metadata = _decode_metadata(data[pos : pos + meta_len])
    pos += meta_len
    (payload_len,) = struct.unpack("<I", data[pos : pos + 4])
    pos += 4
    if pos + payload_len != len(data) - 4:
        raise CorruptArtifactError("payload length disagrees with artifact size")
    payload = data[pos : pos + payload_len]
    return ModelArtifact(KIND_NAMES[kind_code], metadata, payload)


def payload_offset(data: bytes) -> int:
    """Byte position where the weight stream starts inside artifact bytes."""
    (meta_len,) = struct.unpack("<I", data[6:10])
    return 10 + meta_len + 4


def import_artifact(data: bytes, expected=None) -> tuple[ParamTree, dict[str, str]]:
    """Decode an artifact; `expected` (a net spec or a hash string) pins the
    architecture the local site is prepared to run."""
    art = parse_artifact(data)
    missing = [k for k in REQUIRED_KEYS if k not in art.metadata]
    if missing:
        raise CorruptArtifactError(f"artifact metadata missing keys: {missing}")
    if expected is not None:
        expected_hash = expected if isinstance(expected, str) else expected.arch_hash()
        if art.arch != expected_hash:
            raise IncompatibleArchitectureError(
                f"artifact architecture {art.arch} does not match local {expected_hash}"
            )
    params = decode_weights(art.payload)
    if expected is not None and not isinstance(expected, str):
        if params.shapes() != expected.param_shapes():
            raise IncompatibleArchitectureError(
                "weight stream shapes do not match the declared architecture"
            )
    return params, dict(art.metadata)
