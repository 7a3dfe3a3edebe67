"""Synthetic two-hospital cardiac phantom data.

Each sample is a 32x32 intensity image of an annular "myocardium" between a
bright blood-pool disk and a dark background, plus the exact annulus as a
binary mask. Site profiles control tissue means, noise level and the
multiplicative shading ramp, which is how cross-site appearance shift is
injected. Patients get a persistent anatomy draw; slices jitter around it,
so slices of one patient are correlated and patient-level splitting matters.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .nn.rng import RngStream

IMAGE_SIZE = 32
FDS_MAGIC = b"FDS1"
MANIFEST_NAME = "manifest.tsv"
PROFILE_NAME = "profile.txt"
FG_FRACTION_RANGE = (0.02, 0.30)
SPLIT_NAMES = ("train", "val", "test")
_SPLIT_STREAM = 1 << 32  # keep clear of per-patient stream ids


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Provenance:
    kind: str  # "real" or "syn"
    site_id: str

    def __post_init__(self):
        if self.kind not in ("real", "syn"):
            raise DatasetError(f"bad provenance kind {self.kind!r}")

    def __str__(self) -> str:
        return f"{self.kind}:{self.site_id}"

    @property
    def is_real(self) -> bool:
        return self.kind == "real"

    @classmethod
    def real(cls, site_id: str) -> "Provenance":
        return cls("real", site_id)

    @classmethod
    def synthetic(cls, generator_site_id: str) -> "Provenance":
        return cls("syn", generator_site_id)

    @classmethod
    def parse(cls, text: str) -> "Provenance":
        kind, _, site = text.partition(":")
        if not site:
            raise DatasetError(f"bad provenance string {text!r}")
        return cls(kind, site)


@dataclass(frozen=True)
class SiteProfile:
    site_id: str
    myo_mean: float
    blood_mean: float
    background_mean: float
    noise_sigma: float
    ring_outer_radius_range: tuple[float, float] = (0.24, 0.33)
    ring_thickness_range: tuple[float, float] = (0.10, 0.15)
    bias_field_strength: float = 0.0

    def validate(self) -> None:
        means = {
            "myo_mean": self.myo_mean,
            "blood_mean": self.blood_mean,
            "background_mean": self.background_mean,
        }
        for name, v in means.items():
            if not 0.0 <= v <= 1.0:
                raise DatasetError(f"{name}={v} outside [0,1]")
        vals = list(means.items())
        for i in range(len(vals)):
            for j in range(i + 1, len(vals)):
                if abs(vals[i][1] - vals[j][1]) < 0.05:
                    raise DatasetError(
                        f"{vals[i][0]} and {vals[j][0]} closer than 0.05"
                    )
        if not 0.0 <= self.bias_field_strength <= 0.5:
            raise DatasetError("bias_field_strength outside [0, 0.5]")
        if self.noise_sigma < 0:
            raise DatasetError("noise_sigma must be >= 0")
        lo, hi = self.ring_outer_radius_range
        tlo, thi = self.ring_thickness_range
        if not 0 < lo <= hi or not 0 < tlo <= thi:
            raise DatasetError("radius/thickness ranges must be positive and ordered")
        # persistent center jitter (1.4) + slice jitter (2) + radius jitter (1)
        max_extent = 16.0 + 1.4 + 2.0 + hi * IMAGE_SIZE + 1.0
        if max_extent > IMAGE_SIZE - 0.5:
            raise DatasetError("ring_outer_radius_range lets the annulus leave the image")


def default_profiles() -> tuple[SiteProfile, SiteProfile]:
    """Hospitals A and B; B is brighter in the myocardium, noisier, shaded."""
    a = SiteProfile(
        site_id="A",
        myo_mean=0.55,
        blood_mean=0.85,
        background_mean=0.15,
        noise_sigma=0.03,
        bias_field_strength=0.0,
    )
    b = replace(
        a, site_id="B", myo_mean=0.75, noise_sigma=0.06, bias_field_strength=0.2
    )
    a.validate()
    b.validate()
    return a, b


@dataclass
class Sample:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    patient_id: int
    slice_index: int
    provenance: Provenance

    def validate(self) -> None:
        if self.image.shape != self.mask.shape:
            raise DatasetError("image/mask shape mismatch")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise DatasetError("image values outside [0,1]")
        vals = np.unique(self.mask)
        if not np.all(np.isin(vals, (0, 1))):
            raise DatasetError("mask is not binary")
        frac = float(self.mask.mean())
        lo, hi = FG_FRACTION_RANGE
        if not lo <= frac <= hi:
            raise DatasetError(f"mask foreground fraction {frac:.3f} outside [{lo},{hi}]")


@dataclass
class SiteDataset:
    site_id: str
    samples: list[Sample] = field(default_factory=list)
    splits: dict[int, str] = field(default_factory=dict)  # patient -> tag
    profile: SiteProfile | None = None

    def patients(self) -> list[int]:
        return sorted({s.patient_id for s in self.samples})

    def split_of(self, patient_id: int) -> str:
        return self.splits.get(patient_id, "-")

    def samples_for(self, split: str) -> list[Sample]:
        return [s for s in self.samples if self.splits.get(s.patient_id) == split]

    def validate(self) -> None:
        for s in self.samples:
            s.validate()
        for pid in self.splits:
            if self.splits[pid] not in SPLIT_NAMES:
                raise DatasetError(f"unknown split tag {self.splits[pid]!r}")


# ------------------------------------------------------------- generation


def _bias_field(strength: float, theta: float) -> np.ndarray:
    if strength == 0.0:
        return np.ones((IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    n = np.linspace(-0.5, 0.5, IMAGE_SIZE, dtype=np.float32)
    ny, nx = np.meshgrid(n, n, indexing="ij")
    ramp = nx * np.cos(theta) + ny * np.sin(theta)
    return (1.0 + strength * ramp).astype(np.float32)


def _render_slice(profile: SiteProfile, cx: float, cy: float, r_out: float,
                  r_in: float, theta: float, noise: np.ndarray):
    idx = np.arange(IMAGE_SIZE, dtype=np.float32)
    yy, xx = np.meshgrid(idx, idx, indexing="ij")
    d2 = (xx - cx) ** 2 + (yy - cy) ** 2
    blood = d2 <= r_in * r_in
    myo = (d2 <= r_out * r_out) & ~blood
    image = np.full((IMAGE_SIZE, IMAGE_SIZE), profile.background_mean, dtype=np.float32)
    image[blood] = profile.blood_mean
    image[myo] = profile.myo_mean
    image *= _bias_field(profile.bias_field_strength, theta)
    image += profile.noise_sigma * noise
    np.clip(image, 0.0, 1.0, out=image)
    return image, myo.astype(np.uint8)


def generate_site_dataset(profile: SiteProfile, n_patients: int,
                          slices_per_patient: int, seed: int) -> SiteDataset:
    """Deterministic synthesis: one RNG stream per patient."""
    profile.validate()
    if n_patients < 5:
        raise DatasetError("need at least 5 patients")
    if slices_per_patient < 1:
        raise DatasetError("need at least 1 slice per patient")

    w = IMAGE_SIZE
    samples: list[Sample] = []
    for pid in range(n_patients):
        st = RngStream(seed, stream=pid)
        center = 16.0 + st.uniform(-1.4, 1.4, (2,))
        r_out0 = float(st.uniform(*profile.ring_outer_radius_range, ()) * w)
        thickness = float(st.uniform(*profile.ring_thickness_range, ()) * w)
        theta = float(st.uniform(0.0, 2.0 * np.pi, ()))
        for sl in range(slices_per_patient):
            jitter = st.uniform(-2.0, 2.0, (2,))
            r_out = r_out0 + float(st.uniform(-1.0, 1.0, ()))
            noise = st.gaussian((w, w))
            image, mask = _render_slice(
                profile,
                float(center[0] + jitter[0]),
                float(center[1] + jitter[1]),
                r_out,
                r_out - thickness,
                theta,
                noise,
            )
            samples.append(
                Sample(image, mask, pid, sl, Provenance.real(profile.site_id))
            )
    ds = SiteDataset(site_id=profile.site_id, samples=samples, profile=profile)
    ds.validate()
    return ds


def split_dataset(ds: SiteDataset, ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
                  seed: int = 0) -> SiteDataset:
    """Tag patients train/val/test, counts within one patient of the ratios."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"ratios must be three values summing to 1, got {ratios}")
    patients = ds.patients()
    n = len(patients)
    counts = [int(np.floor(r * n)) for r in ratios]
    remainders = [r * n - c for r, c in zip(ratios, counts)]
    for _ in range(n - sum(counts)):
        i = int(np.argmax(remainders))
        counts[i] += 1
        remainders[i] = -1.0
    if min(counts) < 1:
        raise DatasetError(f"too few patients ({n}) for a non-empty 3-way split")

    order = RngStream(seed, stream=_SPLIT_STREAM).permutation(n)
    shuffled = [patients[i] for i in order]
    ds.splits = {}
    pos = 0
    for name, c in zip(SPLIT_NAMES, counts):
        for pid in shuffled[pos : pos + c]:
            ds.splits[pid] = name
        pos += c
    return ds


# ------------------------------------------------------------- disk format


def _sample_file_name(s: Sample) -> str:
    return f"p{s.patient_id:04d}_s{s.slice_index:02d}.fds"


def encode_sample(s: Sample) -> bytes:
    h, w = s.image.shape
    body = b"".join(
        (
            FDS_MAGIC,
            struct.pack("<HH", h, w),
            np.ascontiguousarray(s.image, dtype="<f4").tobytes(),
            np.ascontiguousarray(s.mask, dtype=np.uint8).tobytes(),
            struct.pack("<BII", 0 if s.provenance.is_real else 1,
                        s.patient_id, s.slice_index),
        )
    )
    return body + struct.pack("<I", zlib.crc32(body))


def decode_sample(data: bytes, provenance: Provenance) -> Sample:
    if len(data) < 17 or data[:4] != FDS_MAGIC:
        raise DatasetError("not a sample file")
    if struct.unpack("<I", data[-4:])[0] != zlib.crc32(data[:-4]):
        raise DatasetError("sample file checksum mismatch")
    h, w = struct.unpack("<HH", data[4:8])
    pos = 8
    image = np.frombuffer(data[pos : pos + 4 * h * w], dtype="<f4").reshape(h, w).copy()
    pos += 4 * h * w
    mask = np.frombuffer(data[pos : pos + h * w], dtype=np.uint8).reshape(h, w).copy()
    pos += h * w
    tag, pid, sl = struct.unpack("<BII", data[pos : pos + 9])
    if tag != (0 if provenance.is_real else 1):
        raise DatasetError("provenance tag disagrees with manifest")
    return Sample(image, mask, pid, sl, provenance)


def save_dataset(ds: SiteDataset, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in sorted(ds.samples, key=lambda s: (s.patient_id, s.slice_index)):
        name = _sample_file_name(s)
        (directory / name).write_bytes(encode_sample(s))
        rows.append(
            f"{name}\t{s.patient_id}\t{ds.split_of(s.patient_id)}\t{s.provenance}"
        )
    manifest = "file\tpatient\tsplit\tprovenance\n" + "\n".join(rows) + "\n"
    (directory / MANIFEST_NAME).write_text(manifest)
    if ds.profile is not None:
        p = ds.profile
        lines = [
            f"site_id={p.site_id}",
            f"myo_mean={p.myo_mean}",
            f"blood_mean={p.blood_mean}",
            f"background_mean={p.background_mean}",
            f"noise_sigma={p.noise_sigma}",
            f"ring_outer_radius_range={p.ring_outer_radius_range[0]} {p.ring_outer_radius_range[1]}",
            f"ring_thickness_range={p.ring_thickness_range[0]} {p.ring_thickness_range[1]}",
            f"bias_field_strength={p.bias_field_strength}",
        ]
        (directory / PROFILE_NAME).write_text("\n".join(lines) + "\n")
    return directory


def load_profile(path: Path) -> SiteProfile:
    kv = {}
    for line in path.read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            kv[k] = v
    return SiteProfile(
        site_id=kv["site_id"],
        myo_mean=float(kv["myo_mean"]),
        blood_mean=float(kv["blood_mean"]),
        background_mean=float(kv["background_mean"]),
        noise_sigma=float(kv["noise_sigma"]),
        ring_outer_radius_range=tuple(float(x) for x in kv["ring_outer_radius_range"].split()),
        ring_thickness_range=tuple(float(x) for x in kv["ring_thickness_range"].split()),
        bias_field_strength=float(kv["bias_field_strength"]),
    )


def load_dataset(directory: str | Path) -> SiteDataset:
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.is_file():
        raise DatasetError(f"no {MANIFEST_NAME} in {directory}")
    samples: list[Sample] = []
    splits: dict[int, str] = {}
    lines = manifest.read_text().splitlines()
    for line in lines[1:]:
        if not line.strip():
            continue
        name, pid, split, prov = line.split("\t")
        s = decode_sample((directory / name).read_bytes(), Provenance.parse(prov))
        if s.patient_id != int(pid):
            raise DatasetError(f"{name}: patient id disagrees with manifest")
        samples.append(s)
        if split in SPLIT_NAMES:
            prev = splits.get(s.patient_id)
            if prev is not None and prev != split:
                raise DatasetError(f"patient {pid} appears in two splits")
            splits[s.patient_id] = split

    provs = {str(s.provenance) for s in samples}
    if len(provs) == 1:
        p = samples[0].provenance
        site_id = p.site_id if p.is_real else f"syn.{p.site_id}"
    else:
        site_id = "mixed"
    profile = None
    if (directory / PROFILE_NAME).is_file():
        profile = load_profile(directory / PROFILE_NAME)
        if profile.site_id != site_id:
            profile = None
    ds = SiteDataset(site_id=site_id, samples=samples, splits=splits, profile=profile)
    ds.validate()
    return ds
