"""Experiment orchestration: the local and remote-augment runs, the Dice
result matrix, and the real-vs-synthetic histogram comparison.

Only weight artifacts ever cross a site boundary here. Synthetic data is
produced at the recipient from its own masks, joins the training pool only,
and never enters a validation or test set.
"""

from __future__ import annotations

import configparser
import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import (
    DiffusionTrainConfig,
    EpsilonNet,
    EpsilonNetSpec,
    build_schedule,
    synthesize_dataset,
    train_diffusion,
)
from .federation import (
    export_artifact,
    import_artifact,
    parse_address,
    privacy_audit,
    pull_artifact,
    push_artifact,
)
from .phantom import (
    Sample,
    SiteDataset,
    SiteProfile,
    default_profiles,
    generate_site_dataset,
    save_dataset,
    split_dataset,
)
from .segmentation import MetricRow, SegTrainConfig, evaluate, train_segmentation

HIST_BINS = 64
DETERMINISTIC_TIMESTAMP = "1970-01-01T00:00:00Z"
MAIN_ROWS = [("A", "A"), ("A", "B"), ("A+syn.B", "B"), ("A+syn.B", "A")]
MIRROR_ROWS = [("B", "B"), ("B", "A"), ("B+syn.A", "A"), ("B+syn.A", "B")]


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class PrivacyAuditError(RuntimeError):
    def __init__(self, report):
        super().__init__(report.summary())
        self.report = report


# ------------------------------------------------------------------- plan


@dataclass
class SitePlan:
    profile: SiteProfile
    patients: int
    slices: int
    gen_seed: int
    split_seed: int


@dataclass
class ExperimentPlan:
    sites: dict[str, SitePlan]
    diffusion: dict[str, DiffusionTrainConfig]
    segmentation: dict[str, SegTrainConfig]
    rows: list[tuple[str, str]] = field(default_factory=lambda: list(MAIN_ROWS))
    supplementary_rows: list[tuple[str, str]] = field(default_factory=lambda: list(MIRROR_ROWS))
    out_dir: Path = Path("runs/default")
    sample_seed: int = 4242
    registry: str | None = None
    table_format: str = "markdown"
    created: str = DETERMINISTIC_TIMESTAMP

    def validate(self) -> None:
        for rows in (self.rows, self.supplementary_rows):
            for train_spec, test_site in rows:
                for site in _spec_sites(train_spec) + [test_site]:
                    if site not in self.sites:
                        raise ValueError(f"row references undefined site {site!r}")
        for site in self.sites:
            if site not in self.diffusion or site not in self.segmentation:
                raise ValueError(f"site {site!r} lacks a training config")
        seen = set()
        for pair in self.rows + self.supplementary_rows:
            if pair in seen:
                raise ValueError(f"duplicate result row {pair}")
            seen.add(pair)


def _spec_sites(train_spec: str) -> list[str]:
    """'A+syn.B' -> ['A', 'B']; 'A' -> ['A']."""
    local, _, rest = train_spec.partition("+syn.")
    return [local, rest] if rest else [local]


def source_label(spec: str) -> str:
    local, _, rest = spec.partition("+syn.")
    return f"Hospital {local} + syn.{rest}" if rest else f"Hospital {local}"


def default_plan(out_dir: str | Path = "runs/default") -> ExperimentPlan:
    prof_a, prof_b = default_profiles()
    sites = {
        "A": SitePlan(prof_a, patients=40, slices=4, gen_seed=101, split_seed=201),
        "B": SitePlan(prof_b, patients=50, slices=6, gen_seed=102, split_seed=202),
    }
    diffusion = {
        "A": DiffusionTrainConfig(seed=7),
        "B": DiffusionTrainConfig(seed=8),
    }
    segmentation = {
        "A": SegTrainConfig(seed=11),
        "B": SegTrainConfig(seed=12),
    }
    return ExperimentPlan(
        sites=sites,
        diffusion=diffusion,
        segmentation=segmentation,
        out_dir=Path(out_dir),
    )


def write_plan_file(plan: ExperimentPlan, path: str | Path) -> Path:
    cp = configparser.ConfigParser()
    cp["run"] = {
        "out": str(plan.out_dir),
        "format": plan.table_format,
        "registry": plan.registry or "",
        "sample_seed": str(plan.sample_seed),
        "created": plan.created,
        "rows": ", ".join(f"{a}>{b}" for a, b in plan.rows),
        "supplementary_rows": ", ".join(f"{a}>{b}" for a, b in plan.supplementary_rows),
    }
    for sid, sp in plan.sites.items():
        p = sp.profile
        cp[f"site.{sid}"] = {
            "patients": str(sp.patients),
            "slices": str(sp.slices),
            "gen_seed": str(sp.gen_seed),
            "split_seed": str(sp.split_seed),
            "myo_mean": str(p.myo_mean),
            "blood_mean": str(p.blood_mean),
            "background_mean": str(p.background_mean),
            "noise_sigma": str(p.noise_sigma),
            "bias_field_strength": str(p.bias_field_strength),
            "ring_outer_radius_range": f"{p.ring_outer_radius_range[0]} {p.ring_outer_radius_range[1]}",
            "ring_thickness_range": f"{p.ring_thickness_range[0]} {p.ring_thickness_range[1]}",
        }
    for sid, cfg in plan.diffusion.items():
        cp[f"diffusion.{sid}"] = {
            "epochs": str(cfg.epochs),
            "batch_size": str(cfg.batch_size),
            "lr": str(cfg.lr),
            "seed": str(cfg.seed),
            "T": str(cfg.T),
            "beta_min": str(cfg.beta_min),
            "beta_max": str(cfg.beta_max),
        }
    for sid, cfg in plan.segmentation.items():
        cp[f"segmentation.{sid}"] = {
            "epochs": str(cfg.epochs),
            "batch_size": str(cfg.batch_size),
            "lr": str(cfg.lr),
            "seed": str(cfg.seed),
            "patience": str(cfg.patience),
            "threshold": str(cfg.threshold),
        }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        cp.write(fh)
    return path


def _parse_rows(text: str) -> list[tuple[str, str]]:
    rows = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        a, sep, b = part.partition(">")
        if not sep:
            raise ValueError(f"row {part!r} is not of the form TRAIN>TEST")
        rows.append((a.strip(), b.strip()))
    return rows


def parse_plan_file(path: str | Path) -> ExperimentPlan:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(f"plan file {path} not readable")
    run = cp["run"]
    sites: dict[str, SitePlan] = {}
    diffusion: dict[str, DiffusionTrainConfig] = {}
    segmentation: dict[str, SegTrainConfig] = {}
    for section in cp.sections():
        kind, _, sid = section.partition(".")
        if kind == "site":
            s = cp[section]
            profile = SiteProfile(
                site_id=sid,
                myo_mean=s.getfloat("myo_mean"),
                blood_mean=s.getfloat("blood_mean"),
                background_mean=s.getfloat("background_mean"),
                noise_sigma=s.getfloat("noise_sigma"),
                ring_outer_radius_range=tuple(
                    float(x) for x in s.get("ring_outer_radius_range").split()
                ),
                ring_thickness_range=tuple(
                    float(x) for x in s.get("ring_thickness_range").split()
                ),
                bias_field_strength=s.getfloat("bias_field_strength"),
            )
            sites[sid] = SitePlan(
                profile=profile,
                patients=s.getint("patients"),
                slices=s.getint("slices"),
                gen_seed=s.getint("gen_seed"),
                split_seed=s.getint("split_seed"),
            )
        elif kind == "diffusion":
            s = cp[section]
            diffusion[sid] = DiffusionTrainConfig(
                epochs=s.getint("epochs"),
                batch_size=s.getint("batch_size"),
                lr=s.getfloat("lr"),
                seed=s.getint("seed"),
                T=s.getint("T"),
                beta_min=s.getfloat("beta_min"),
                beta_max=s.getfloat("beta_max"),
            )
        elif kind == "segmentation":
            s = cp[section]
            segmentation[sid] = SegTrainConfig(
                epochs=s.getint("epochs"),
                batch_size=s.getint("batch_size"),
                lr=s.getfloat("lr"),
                seed=s.getint("seed"),
                patience=s.getint("patience"),
                threshold=s.getfloat("threshold"),
            )
    plan = ExperimentPlan(
        sites=sites,
        diffusion=diffusion,
        segmentation=segmentation,
        out_dir=Path(run.get("out", "runs/default")),
        sample_seed=run.getint("sample_seed", 4242),
        registry=run.get("registry", "") or None,
        table_format=run.get("format", "markdown"),
        created=run.get("created", DETERMINISTIC_TIMESTAMP),
    )
    if run.get("rows", ""):
        plan.rows = _parse_rows(run["rows"])
    if "supplementary_rows" in run:
        plan.supplementary_rows = _parse_rows(run["supplementary_rows"])
    plan.validate()
    return plan


# ------------------------------------------------------------ result types


@dataclass
class ResultTable:
    rows: list[MetricRow] = field(default_factory=list)

    def validate(self) -> None:
        labels = [(r.train_source, r.test_source) for r in self.rows]
        if len(labels) != len(set(labels)):
            raise ValueError("duplicate (train_source, test_source) rows")
        for r in self.rows:
            r.validate()

    def dice(self, train_source: str, test_source: str) -> float:
        for r in self.rows:
            if (r.train_source, r.test_source) == (train_source, test_source):
                return r.dice
        raise KeyError((train_source, test_source))


@dataclass
class HistogramReport:
    bins: int
    histograms: dict[tuple[str, str], np.ndarray]  # (dataset, region) -> mass
    distances: dict[tuple[str, str, str], float]  # (region, a, b) -> L1

    def l1(self, region: str, a: str, b: str) -> float:
        return self.distances[(region, a, b)]


def compute_histograms(named: dict[str, SiteDataset | list[Sample]],
                       bins: int = HIST_BINS) -> HistogramReport:
    """Pooled pixel histograms per dataset, whole-image and inside-mask."""
    histograms: dict[tuple[str, str], np.ndarray] = {}
    for name, ds in named.items():
        samples = ds.samples if isinstance(ds, SiteDataset) else list(ds)
        if not samples:
            raise ValueError(f"dataset {name!r} is empty")
        whole = np.concatenate([s.image.ravel() for s in samples])
        myo = np.concatenate([s.image[s.mask > 0] for s in samples])
        if myo.size == 0:
            raise ValueError(f"dataset {name!r} has an empty myocardium region")
        for region, pixels in (("whole", whole), ("myocardium", myo)):
            h, _ = np.histogram(pixels, bins=bins, range=(0.0, 1.0))
            histograms[(name, region)] = h.astype(np.float64) / h.sum()
    names = sorted(named)
    distances = {}
    for region in ("whole", "myocardium"):
        for a in names:
            for b in names:
                d = float(np.abs(histograms[(a, region)] - histograms[(b, region)]).sum())
                distances[(region, a, b)] = d
    return HistogramReport(bins=bins, histograms=histograms, distances=distances)


# -------------------------------------------------------------- experiments


def run_local_experiment(site_ds: SiteDataset, others: list[SiteDataset],
                         cfg: SegTrainConfig):
    """Train on one site's real train split, evaluate on every site's test."""
    label = source_label(site_ds.site_id)
    params, log = train_segmentation(
        site_ds.samples_for("train"), site_ds.samples_for("val"), cfg
    )
    rows = [evaluate(params, site_ds, cfg.threshold, train_source=label)]
    for other in others:
        rows.append(evaluate(params, other, cfg.threshold, train_source=label))
    return params, rows, log


def run_remote_augment(local_ds: SiteDataset, artifact_bytes: bytes,
                       seg_cfg: SegTrainConfig, sample_seed: int,
                       eval_sites: list[SiteDataset],
                       spec: EpsilonNetSpec | None = None):
    """Synthesize remote-style images on local masks, train on the union,
    evaluate remote-first. The privacy audit gates everything."""
    report = privacy_audit(artifact_bytes, local_ds)
    if not report.passed:
        raise PrivacyAuditError(report)
    spec = spec or EpsilonNetSpec()
    params, metadata = import_artifact(artifact_bytes, expected=spec)
    generator_site = metadata["origin"]
    sched = build_schedule(
        int(metadata["T"]), float(metadata["beta_min"]), float(metadata["beta_max"])
    )
    net = EpsilonNet(spec, params)
    syn = synthesize_dataset(net, local_ds, sched, sample_seed, generator_site)

    label = source_label(f"{local_ds.site_id}+syn.{generator_site}")
    train = local_ds.samples_for("train") + syn.samples_for("train")
    seg_params, log = train_segmentation(train, local_ds.samples_for("val"), seg_cfg)
    rows = [
        evaluate(seg_params, ds, seg_cfg.threshold, train_source=label)
        for ds in eval_sites
    ]
    return seg_params, rows, log, syn


# ------------------------------------------------------------ full pipeline


def _config_digest(cfg) -> str:
    return hashlib.sha256(repr(cfg).encode()).hexdigest()[:16]


class _StageLog:
    def __init__(self, out_dir: Path):
        self.dir = out_dir / "logs"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.stage_lines: list[str] = []

    def write(self, name: str, lines: list[str]) -> None:
        (self.dir / f"{name}.txt").write_text("\n".join(lines) + "\n")

    def record(self, stage: str, seconds: float) -> None:
        self.stage_lines.append(f"{stage}\t{seconds:.2f}s")
        (self.dir / "stages.txt").write_text("\n".join(self.stage_lines) + "\n")

    def fail(self, stage: str, err: BaseException) -> None:
        (self.dir / "failure.txt").write_text(f"stage={stage}\nerror={err}\n")


@dataclass
class FullRunResult:
    table: ResultTable
    supplementary: ResultTable
    histograms: HistogramReport
    artifact_bytes: dict[str, bytes]
    out_dir: Path
    report_paths: list[Path]


def run_full_matrix(plan: ExperimentPlan) -> FullRunResult:
    """Execute the whole plan: data, diffusion training, artifact exchange,
    audits, both experiments and all reports."""
    plan.validate()
    out = Path(plan.out_dir)
    for sub in ("datasets", "artifacts", "reports", "logs"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    slog = _StageLog(out)
    registry_addr = parse_address(plan.registry) if plan.registry else None

    def stage(name: str):
        class _Ctx:
            def __enter__(self_inner):
                self_inner.t0 = time.perf_counter()
                return self_inner

            def __exit__(self_inner, exc_type, exc, tb):
                if exc is not None:
                    slog.fail(name, exc)
                    raise StageError(name, exc) from exc
                slog.record(name, time.perf_counter() - self_inner.t0)
                return False

        return _Ctx()

    datasets: dict[str, SiteDataset] = {}
    with stage("generate-data"):
        for sid, sp in plan.sites.items():
            ds = generate_site_dataset(sp.profile, sp.patients, sp.slices, sp.gen_seed)
            split_dataset(ds, seed=sp.split_seed)
            save_dataset(ds, out / "datasets" / f"site_{sid}")
            datasets[sid] = ds

    spec = EpsilonNetSpec()
    artifact_bytes: dict[str, bytes] = {}
    for sid in sorted(plan.sites):
        with stage(f"train-diffusion-{sid}"):
            cfg = plan.diffusion[sid]
            params, dlog = train_diffusion(datasets[sid], cfg)
            slog.write(
                f"diffusion_{sid}",
                [f"epoch {i + 1}\tloss {v:.6f}" for i, v in enumerate(dlog.epoch_losses)],
            )
            metadata = {
                "name": f"diffusion_{sid}",
                "origin": sid,
                "arch": spec.arch_hash(),
                "config_digest": _config_digest(cfg),
                "created": plan.created,
                "T": str(cfg.T),
                "beta_min": repr(cfg.beta_min),
                "beta_max": repr(cfg.beta_max),
            }
            blob = export_artifact(params, "diffusion", metadata)
            report = privacy_audit(blob, datasets[sid])
            if not report.passed:
                raise PrivacyAuditError(report)
            (out / "artifacts" / f"diffusion_{sid}.fdma").write_bytes(blob)
            artifact_bytes[sid] = blob
            if registry_addr:
                push_artifact(registry_addr, blob, name=f"diffusion_{sid}")

    def fetch(generator_site: str) -> bytes:
        if registry_addr:
            return pull_artifact(registry_addr, f"diffusion_{generator_site}")
        return artifact_bytes[generator_site]

    all_rows = plan.rows + plan.supplementary_rows
    train_specs: list[str] = []
    for ts, _ in all_rows:
        if ts not in train_specs:
            train_specs.append(ts)

    trained: dict[str, object] = {}
    synthetic: dict[str, SiteDataset] = {}
    for ts in train_specs:
        parts = _spec_sites(ts)
        local = parts[0]
        with stage(f"train-seg-{ts}"):
            if len(parts) == 1:
                params, _, log = run_local_experiment(datasets[local], [], plan.segmentation[local])
            else:
                generator = parts[1]
                offset = sorted(plan.sites).index(local)
                params, _, log, syn = run_remote_augment(
                    datasets[local],
                    fetch(generator),
                    plan.segmentation[local],
                    plan.sample_seed + offset,
                    [],
                )
                synthetic[f"syn.{generator}"] = syn
                save_dataset(syn, out / "datasets" / f"syn_{generator}_at_{local}")
            trained[ts] = params
            slog.write(
                f"segmentation_{ts.replace('+', '_plus_')}",
                [
                    f"epoch {i + 1}\tloss {l:.6f}\tval_dice {d:.4f}"
                    for i, (l, d) in enumerate(zip(log.epoch_losses, log.val_dice))
                ]
                + [f"best epoch {log.best_epoch + 1}\tval_dice {log.best_val_dice:.4f}"],
            )

    def build_table(rows: list[tuple[str, str]]) -> ResultTable:
        table = ResultTable()
        for ts, test_site in rows:
            cfg = plan.segmentation[_spec_sites(ts)[0]]
            table.rows.append(
                evaluate(trained[ts], datasets[test_site], cfg.threshold,
                         train_source=source_label(ts))
            )
        table.validate()
        return table

    with stage("evaluate"):
        table = build_table(plan.rows)
        supplementary = build_table(plan.supplementary_rows)

    with stage("histograms"):
        named: dict[str, SiteDataset | list[Sample]] = {
            f"real {sid}": datasets[sid].samples_for("train") for sid in sorted(plan.sites)
        }
        for name, syn in synthetic.items():
            named[name] = syn
        histograms = compute_histograms(named)

    with stage("reports"):
        paths = emit_report(table, histograms, plan.table_format, out / "reports",
                            supplementary=supplementary)
        extra = "tsv" if plan.table_format == "markdown" else "markdown"
        paths += emit_report(table, None, extra, out / "reports", supplementary=supplementary)

    return FullRunResult(
        table=table,
        supplementary=supplementary,
        histograms=histograms,
        artifact_bytes=artifact_bytes,
        out_dir=out,
        report_paths=paths,
    )


# ---------------------------------------------------------------- reports


def _markdown_table(table: ResultTable) -> str:
    lines = [
        "| Train Data Source | Test Data Source | DICE |",
        "| --- | --- | --- |",
    ]
    for r in table.rows:
        lines.append(f"| {r.train_source} | {r.test_source} | {r.dice:.3f} |")
    return "\n".join(lines) + "\n"


def _tsv_table(table: ResultTable) -> str:
    lines = ["train_source\ttest_source\tdice\tn_slices\tper_slice"]
    for r in table.rows:
        per = ",".join(repr(v) for v in r.per_slice)
        lines.append(f"{r.train_source}\t{r.test_source}\t{r.dice!r}\t{len(r.per_slice)}\t{per}")
    return "\n".join(lines) + "\n"


def parse_tsv_table(text: str) -> ResultTable:
    table = ResultTable()
    for line in text.splitlines()[1:]:
        if not line:
            continue
        train, test, dice, _, per = line.split("\t")
        table.rows.append(
            MetricRow(train, test, float(dice), [float(v) for v in per.split(",")])
        )
    return table


def emit_report(table: ResultTable, histograms: HistogramReport | None,
                fmt: str, out_dir: str | Path,
                supplementary: ResultTable | None = None) -> list[Path]:
    """Write the result table (and histogram TSVs when given)."""
    if fmt not in ("tsv", "markdown"):
        raise ValueError(f"format must be tsv or markdown, got {fmt!r}")
    if not table.rows:
        raise ValueError("result table is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    render = _markdown_table if fmt == "markdown" else _tsv_table
    ext = "md" if fmt == "markdown" else "tsv"
    p = out_dir / f"results.{ext}"
    p.write_text(render(table))
    paths.append(p)
    if supplementary is not None and supplementary.rows:
        p = out_dir / f"supplementary.{ext}"
        p.write_text(render(supplementary))
        paths.append(p)
    if histograms is not None:
        paths += write_histogram_files(histograms, out_dir)
    return paths


def write_histogram_files(histograms: HistogramReport, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["dataset\tregion\tbin_lo\tbin_hi\tmass"]
    edges = np.linspace(0.0, 1.0, histograms.bins + 1)
    for (name, region), h in sorted(histograms.histograms.items()):
        for i, mass in enumerate(h):
            lines.append(f"{name}\t{region}\t{edges[i]:.6f}\t{edges[i + 1]:.6f}\t{mass!r}")
    hist_path = out_dir / "histograms.tsv"
    hist_path.write_text("\n".join(lines) + "\n")
    lines = ["region\ta\tb\tl1"]
    for (region, a, b), d in sorted(histograms.distances.items()):
        lines.append(f"{region}\t{a}\t{b}\t{d!r}")
    dist_path = out_dir / "hist_distances.tsv"
    dist_path.write_text("\n".join(lines) + "\n")
    return [hist_path, dist_path]
