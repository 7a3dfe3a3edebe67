"""Privacy audit: enforce the weights-plus-bounded-metadata contract.

Rules
  1  schema whitelist: frame sections and metadata keys only as declared
  2  metadata section within the 16 KiB cap
  3  no 64-byte window of the payload reproduces a 64-byte window of any
     raw image in the provided dataset (rolling-hash scan)
  4  payload length matches the declared architecture hash

A report with findings is a *failed audit*; bytes that do not parse as an
artifact at all raise instead.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ..nn.codec import CodecError, decode_weights, expected_stream_length
from ..phantom import Sample, SiteDataset
from .artifact import (
    ALLOWED_KEYS,
    METADATA_CAP,
    parse_artifact,
    payload_offset,
)

WINDOW = 64
_HASH_BASE = np.uint64(1099511628211)


@dataclass(frozen=True)
class Finding:
    rule: int
    offset: int
    description: str

    def __str__(self) -> str:
        return f"rule {self.rule} at byte {self.offset}: {self.description}"


@dataclass
class AuditReport:
    findings: list[Finding] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.findings

    def summary(self) -> str:
        if self.passed:
            return "privacy audit: PASS"
        lines = [f"privacy audit: FAIL ({len(self.findings)} finding(s))"]
        lines += [f"  - {f}" for f in self.findings]
        return "\n".join(lines)


def _window_hashes(buf: bytes) -> np.ndarray:
    """Polynomial hash (wrapping uint64) of every WINDOW-byte window."""
    n = len(buf) - WINDOW + 1
    if n <= 0:
        return np.empty(0, dtype=np.uint64)
    arr = np.frombuffer(buf, dtype=np.uint8).astype(np.uint64)
    pows = np.empty(WINDOW, dtype=np.uint64)
    pows[-1] = 1
    for i in range(WINDOW - 2, -1, -1):
        pows[i] = pows[i + 1] * _HASH_BASE
    windows = np.lib.stride_tricks.sliding_window_view(arr, WINDOW)
    out = np.empty(n, dtype=np.uint64)
    chunk = 1 << 17
    for lo in range(0, n, chunk):
        out[lo : lo + chunk] = (windows[lo : lo + chunk] * pows).sum(axis=1)
    return out


def _image_bytes(sample: Sample) -> bytes:
    return np.ascontiguousarray(sample.image, dtype="<f4").tobytes()


def _leak_findings(payload: bytes, base_offset: int, samples: list[Sample]) -> list[Finding]:
    if not samples or len(payload) < WINDOW:
        return []
    image_hashes = [_window_hashes(_image_bytes(s)) for s in samples]
    universe = np.unique(np.concatenate(image_hashes))
    payload_hashes = _window_hashes(payload)
    hits = np.nonzero(np.isin(payload_hashes, universe))[0]
    if hits.size == 0:
        return []
    # slow path, only on candidate hits: verify bytes to rule out collisions
    sources: dict[bytes, tuple[int, int]] = {}
    for si, s in enumerate(samples):
        raw = _image_bytes(s)
        for off in range(len(raw) - WINDOW + 1):
            sources.setdefault(raw[off : off + WINDOW], (si, off))
    findings = []
    confirmed = 0
    first = None
    for i in hits:
        src = sources.get(payload[i : i + WINDOW])
        if src is not None:
            confirmed += 1
            if first is None:
                first = (int(i), src)
    if first is not None:
        i, (si, off) = first
        s = samples[si]
        findings.append(
            Finding(
                3,
                base_offset + i,
                f"payload window matches raw image bytes of patient {s.patient_id} "
                f"slice {s.slice_index} (image offset {off}); "
                f"{confirmed} matching window(s) total",
            )
        )
    return findings


def default_architecture_registry() -> dict[str, int]:
    """Expected payload byte length per known architecture hash."""
    from ..diffusion import EpsilonNetSpec
    from ..segmentation import SegNetSpec

    out = {}
    for spec in (EpsilonNetSpec(), SegNetSpec()):
        out[spec.arch_hash()] = expected_stream_length(spec.param_shapes())
    return out


def privacy_audit(data: bytes, dataset: SiteDataset | list[Sample] | None,
                  known_architectures: dict[str, int] | None = None) -> AuditReport:
    """Check artifact bytes against the model-not-data contract."""
    art = parse_artifact(data)  # unparseable input raises, by contract
    report = AuditReport()

    unknown = sorted(set(art.metadata) - ALLOWED_KEYS)
    if unknown:
        report.findings.append(
            Finding(1, 10, f"metadata keys outside the schema whitelist: {unknown}")
        )

    (meta_len,) = struct.unpack("<I", data[6:10])
    if meta_len > METADATA_CAP:
        report.findings.append(
            Finding(2, 6, f"metadata section is {meta_len} bytes, cap is {METADATA_CAP}")
        )

    pay_off = payload_offset(data)
    try:
        decode_weights(art.payload)
    except CodecError as err:
        report.findings.append(
            Finding(1, pay_off + err.offset, f"payload is not a valid weight stream: {err}")
        )

    samples = dataset.samples if isinstance(dataset, SiteDataset) else (dataset or [])
    report.findings.extend(_leak_findings(art.payload, pay_off, list(samples)))

    registry = known_architectures
    if registry is None:
        registry = default_architecture_registry()
    declared = art.metadata.get("arch", "")
    if declared not in registry:
        report.findings.append(
            Finding(4, pay_off, f"declared architecture hash {declared!r} is not known")
        )
    elif registry[declared] != len(art.payload):
        report.findings.append(
            Finding(
                4,
                pay_off,
                f"payload is {len(art.payload)} bytes but architecture "
                f"{declared[:12]}... expects {registry[declared]}",
            )
        )
    report.findings.sort(key=lambda f: (f.rule, f.offset))
    return report
