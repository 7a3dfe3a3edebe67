"""Weights-only model exchange: artifacts, privacy audit, registry service."""

from .artifact import (
    ArtifactError,
    CorruptArtifactError,
    IncompatibleArchitectureError,
    METADATA_CAP,
    ModelArtifact,
    export_artifact,
    import_artifact,
    parse_artifact,
    payload_offset,
)
from .audit import AuditReport, Finding, default_architecture_registry, privacy_audit
from .client import (
    NotFoundError,
    RegistryError,
    TransferError,
    list_artifacts,
    parse_address,
    pull_artifact,
    push_artifact,
)
from .registry import RegistryIndex, RegistryServer, serve_registry

__all__ = [
    "ArtifactError",
    "AuditReport",
    "CorruptArtifactError",
    "Finding",
    "IncompatibleArchitectureError",
    "METADATA_CAP",
    "ModelArtifact",
    "NotFoundError",
    "RegistryError",
    "RegistryIndex",
    "RegistryServer",
    "TransferError",
    "default_architecture_registry",
    "export_artifact",
    "import_artifact",
    "list_artifacts",
    "parse_address",
    "parse_artifact",
    "payload_offset",
    "privacy_audit",
    "pull_artifact",
    "push_artifact",
    "serve_registry",
]
