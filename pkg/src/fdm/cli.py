"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 audit or
verification failure. Progress goes to stderr; results go to files (and
stdout where a single table/report is the natural product).

Heavy imports happen inside handlers so the BLAS thread cap (FDM_THREADS,
default 1 for determinism) is in place before numpy initializes.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_VERIFICATION = 3

_DEFAULT_COUNTS = {"A": (40, 4), "B": (50, 6)}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we contract 1
        raise _UsageError(message)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _pin_threads() -> None:
    workers = os.environ.get("FDM_THREADS", "1")
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, workers)


# ------------------------------------------------------------- subcommands


def _site_profile(site: str):
    from .phantom import default_profiles

    profiles = {p.site_id: p for p in default_profiles()}
    if site not in profiles:
        raise ValueError(f"unknown site {site!r}; built-in profiles: {sorted(profiles)}")
    return profiles[site]


def cmd_gen_data(args) -> int:
    from .phantom import generate_site_dataset, save_dataset

    profile = _site_profile(args.site)
    patients, slices = _DEFAULT_COUNTS.get(args.site, (40, 4))
    patients = args.patients or patients
    slices = args.slices or slices
    ds = generate_site_dataset(profile, patients, slices, args.seed)
    save_dataset(ds, args.out)
    _log(f"wrote {len(ds.samples)} samples for site {args.site} to {args.out}")
    return EXIT_OK


def cmd_split(args) -> int:
    from .phantom import load_dataset, save_dataset, split_dataset

    ds = load_dataset(args.data)
    ratios = tuple(float(x) for x in args.ratios.split())
    split_dataset(ds, ratios, args.seed)
    save_dataset(ds, args.data)
    counts = {t: sum(1 for v in ds.splits.values() if v == t) for t in ("train", "val", "test")}
    _log(f"split {len(ds.patients())} patients: {counts}")
    return EXIT_OK


def _write_meta(path: Path, meta: dict[str, str]) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in sorted(meta.items())))


def _read_meta(path: Path) -> dict[str, str]:
    out = {}
    if path.is_file():
        for line in path.read_text().splitlines():
            k, _, v = line.partition("=")
            if k:
                out[k] = v
    return out


def cmd_train_diffusion(args) -> int:
    import hashlib

    from .diffusion import DiffusionTrainConfig, train_diffusion
    from .nn.codec import encode_weights
    from .phantom import load_dataset

    ds = load_dataset(args.data)
    cfg = DiffusionTrainConfig(seed=args.seed)
    if args.epochs:
        cfg.epochs = args.epochs
    if args.steps:
        cfg.T = args.steps
    if args.lr:
        cfg.lr = args.lr
    params, log = train_diffusion(ds, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(encode_weights(params))
    _write_meta(
        out.with_suffix(out.suffix + ".meta"),
        {
            "kind": "diffusion",
            "origin": ds.site_id,
            "T": str(cfg.T),
            "beta_min": repr(cfg.beta_min),
            "beta_max": repr(cfg.beta_max),
            "config_digest": hashlib.sha256(repr(cfg).encode()).hexdigest()[:16],
        },
    )
    _log(f"trained {cfg.epochs} epochs; loss {log.epoch_losses[0]:.4f} -> "
         f"{log.epoch_losses[-1]:.4f}; weights at {out}")
    return EXIT_OK


def cmd_train_seg(args) -> int:
    import hashlib

    from .nn.codec import encode_weights
    from .phantom import load_dataset
    from .segmentation import SegTrainConfig, train_segmentation

    ds = load_dataset(args.data)
    cfg = SegTrainConfig(seed=args.seed)
    if args.epochs:
        cfg.epochs = args.epochs
    if args.lr:
        cfg.lr = args.lr
    train = ds.samples_for("train")
    if args.extra:
        extra = load_dataset(args.extra)
        train = train + extra.samples_for("train")
    params, log = train_segmentation(train, ds.samples_for("val"), cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(encode_weights(params))
    _write_meta(
        out.with_suffix(out.suffix + ".meta"),
        {
            "kind": "segmentation",
            "origin": ds.site_id,
            "config_digest": hashlib.sha256(repr(cfg).encode()).hexdigest()[:16],
        },
    )
    _log(f"best val dice {log.best_val_dice:.4f} at epoch {log.best_epoch + 1}; "
         f"weights at {out}")
    return EXIT_OK


def _load_diffusion_artifact(path: str):
    from .diffusion import EpsilonNet, EpsilonNetSpec, build_schedule
    from .federation import import_artifact

    blob = Path(path).read_bytes()
    spec = EpsilonNetSpec()
    params, metadata = import_artifact(blob, expected=spec)
    sched = build_schedule(
        int(metadata["T"]), float(metadata["beta_min"]), float(metadata["beta_max"])
    )
    return EpsilonNet(spec, params), metadata, sched, blob


def cmd_sample(args) -> int:
    from .nn.rng import RngStream
    from .diffusion import sample_conditional
    from .phantom import Provenance, Sample, SiteDataset, load_dataset, save_dataset

    net, metadata, sched, _ = _load_diffusion_artifact(args.artifact)
    ds = load_dataset(args.data)
    masks = sorted(ds.samples_for("train"), key=lambda s: (s.patient_id, s.slice_index))
    if not masks:
        raise ValueError("no train-split masks available to condition on")
    masks = masks[: args.count]
    prov = Provenance.synthetic(metadata["origin"])
    out_samples = []
    for i, src in enumerate(masks):
        img = sample_conditional(net, src.mask, sched, RngStream(args.seed, stream=i))
        out_samples.append(Sample(img, src.mask.copy(), src.patient_id, src.slice_index, prov))
        _log(f"sampled {i + 1}/{len(masks)}")
    out = SiteDataset(
        site_id=f"syn.{metadata['origin']}",
        samples=out_samples,
        splits={s.patient_id: "train" for s in out_samples},
    )
    save_dataset(out, args.out)
    _log(f"wrote {len(out_samples)} samples to {args.out}")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    from .diffusion import synthesize_dataset
    from .phantom import load_dataset, save_dataset

    net, metadata, sched, _ = _load_diffusion_artifact(args.artifact)
    ds = load_dataset(args.data)
    syn = synthesize_dataset(net, ds, sched, args.seed, metadata["origin"])
    save_dataset(syn, args.out)
    _log(f"synthesized {len(syn.samples)} images (generator {metadata['origin']}) to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .nn.codec import decode_weights
    from .phantom import load_dataset
    from .segmentation import evaluate

    params = decode_weights(Path(args.weights).read_bytes())
    ds = load_dataset(args.data)
    row = evaluate(params, ds, args.threshold, train_source=args.train_label,
                   split=args.split)
    line = f"{row.train_source or '-'}\t{row.test_source}\t{row.dice:.4f}\t{len(row.per_slice)}"
    print(line)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        per = ",".join(repr(v) for v in row.per_slice)
        out.write_text(
            "train_source\ttest_source\tdice\tn_slices\tper_slice\n"
            f"{row.train_source}\t{row.test_source}\t{row.dice!r}\t{len(row.per_slice)}\t{per}\n"
        )
    return EXIT_OK


def cmd_export(args) -> int:
    import datetime

    from .diffusion import EpsilonNetSpec
    from .federation import export_artifact
    from .nn.codec import decode_weights
    from .segmentation import SegNetSpec

    weights_path = Path(args.weights)
    params = decode_weights(weights_path.read_bytes())
    meta = _read_meta(weights_path.with_suffix(weights_path.suffix + ".meta"))
    kind = args.kind or meta.get("kind")
    if kind not in ("diffusion", "segmentation"):
        raise ValueError("artifact kind unknown; pass --kind diffusion|segmentation")
    spec = EpsilonNetSpec() if kind == "diffusion" else SegNetSpec()
    created = args.timestamp or datetime.datetime.now(datetime.timezone.utc).strftime(
        "%Y-%m-%dT%H:%M:%SZ"
    )
    metadata = {
        "name": args.name,
        "origin": args.site or meta.get("origin", "unknown"),
        "arch": spec.arch_hash(),
        "config_digest": meta.get("config_digest", "unspecified"),
        "created": created,
    }
    if kind == "diffusion":
        for key in ("T", "beta_min", "beta_max"):
            if key not in meta and not args.steps:
                raise ValueError(f"diffusion metadata needs {key}; missing from sidecar")
        metadata["T"] = str(args.steps) if args.steps else meta["T"]
        metadata["beta_min"] = meta.get("beta_min", "0.0001")
        metadata["beta_max"] = meta.get("beta_max", "0.02")
    blob = export_artifact(params, kind, metadata)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(blob)
    _log(f"exported {kind} artifact {args.name} ({len(blob)} bytes) to {out}")
    return EXIT_OK


def cmd_import(args) -> int:
    from .diffusion import EpsilonNetSpec
    from .federation import import_artifact, parse_artifact
    from .nn.codec import encode_weights
    from .segmentation import SegNetSpec

    blob = Path(args.artifact).read_bytes()
    kind = parse_artifact(blob).kind
    spec = EpsilonNetSpec() if kind == "diffusion" else SegNetSpec()
    params, metadata = import_artifact(blob, expected=spec)
    for k in sorted(metadata):
        print(f"{k}={metadata[k]}")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_bytes(encode_weights(params))
        _log(f"weights written to {out}")
    return EXIT_OK


def cmd_audit(args) -> int:
    from .federation import privacy_audit
    from .phantom import load_dataset

    blob = Path(args.artifact).read_bytes()
    dataset = load_dataset(args.dataset) if args.dataset else None
    report = privacy_audit(blob, dataset)
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_VERIFICATION


def cmd_serve(args) -> int:
    from .federation import serve_registry
    from .federation.client import parse_address

    server = serve_registry(parse_address(args.addr), args.store)
    host, port = server.address
    _log(f"registry listening on {host}:{port}, store {args.store}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        _log("shutting down")
        server.stop()
    return EXIT_OK


def cmd_push(args) -> int:
    from .federation import push_artifact
    from .federation.client import parse_address

    name = push_artifact(parse_address(args.addr), Path(args.artifact).read_bytes(),
                         name=args.name)
    _log(f"pushed {name}")
    return EXIT_OK


def cmd_pull(args) -> int:
    from .federation import pull_artifact
    from .federation.client import parse_address

    data = pull_artifact(parse_address(args.addr), args.name)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(data)
    _log(f"pulled {args.name} ({len(data)} bytes) to {out}")
    return EXIT_OK


def cmd_histograms(args) -> int:
    from .experiments import compute_histograms, write_histogram_files
    from .phantom import load_dataset

    named = {}
    for spec in args.data:
        name, _, path = spec.partition("=")
        if not path:
            raise ValueError(f"--data expects NAME=DIR, got {spec!r}")
        named[name] = load_dataset(path)
    report = compute_histograms(named, bins=args.bins)
    paths = write_histogram_files(report, args.out)
    _log("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def cmd_run(args) -> int:
    from .experiments import (
        default_plan,
        parse_plan_file,
        run_full_matrix,
        write_plan_file,
    )

    if args.dump_plan:
        path = write_plan_file(default_plan(args.out or "runs/default"), args.dump_plan)
        _log(f"default plan written to {path}")
        return EXIT_OK
    plan = parse_plan_file(args.plan) if args.plan else default_plan(args.out or "runs/default")
    if args.out:
        plan.out_dir = Path(args.out)
    if args.format:
        plan.table_format = args.format
    result = run_full_matrix(plan)
    for path in result.report_paths:
        _log(f"report: {path}")
    md = next((p for p in result.report_paths if p.suffix == ".md" and p.stem == "results"), None)
    if md is not None:
        print(md.read_text(), end="")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> _Parser:
    parser = _Parser(prog="fdm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a phantom site dataset")
    p.add_argument("--site", required=True, help="site id (A or B for built-ins)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patients", type=int, default=0)
    p.add_argument("--slices", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("split", help="assign patient-level train/val/test tags")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", default="0.6 0.2 0.2")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train-diffusion", help="train the mask-conditioned generator")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--epochs", type=int, default=0)
    p.add_argument("--steps", type=int, default=0, help="diffusion steps T")
    p.add_argument("--lr", type=float, default=0.0)
    p.set_defaults(func=cmd_train_diffusion)

    p = sub.add_parser("sample", help="sample a few images from an artifact")
    p.add_argument("--artifact", required=True)
    p.add_argument("--data", required=True, help="dataset supplying conditioning masks")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("synthesize", help="one synthetic image per local train mask")
    p.add_argument("--artifact", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("train-seg", help="train the segmentation net")
    p.add_argument("--data", required=True)
    p.add_argument("--extra", default="", help="extra (synthetic) training dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=11)
    p.add_argument("--epochs", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.0)
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("evaluate", help="mean Dice of a weight file on a split")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--train-label", default="")
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export", help="wrap weights into a shareable artifact")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--name", required=True)
    p.add_argument("--site", default="", help="origin site id")
    p.add_argument("--kind", default="", choices=["", "diffusion", "segmentation"])
    p.add_argument("--steps", type=int, default=0, help="override diffusion T metadata")
    p.add_argument("--timestamp", default="", help="fix the created timestamp")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("import", help="verify an artifact and unpack its weights")
    p.add_argument("--artifact", required=True)
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("audit", help="privacy-audit an artifact against a dataset")
    p.add_argument("--artifact", required=True)
    p.add_argument("--dataset", default="")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("serve", help="run the artifact registry service")
    p.add_argument("--addr", required=True, help="host:port to bind")
    p.add_argument("--store", required=True)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("push", help="upload an artifact to a registry")
    p.add_argument("--addr", required=True)
    p.add_argument("--artifact", required=True)
    p.add_argument("--name", default=None)
    p.set_defaults(func=cmd_push)

    p = sub.add_parser("pull", help="download an artifact from a registry")
    p.add_argument("--addr", required=True)
    p.add_argument("--name", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pull)

    p = sub.add_parser("histograms", help="intensity histograms for named datasets")
    p.add_argument("--data", action="append", required=True, metavar="NAME=DIR")
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=64)
    p.set_defaults(func=cmd_histograms)

    p = sub.add_parser("run", help="run the full two-site experiment matrix")
    p.add_argument("--plan", default="")
    p.add_argument("--out", default="")
    p.add_argument("--format", default="", choices=["", "tsv", "markdown"])
    p.add_argument("--dump-plan", default="", help="write the default plan file and exit")
    p.set_defaults(func=cmd_run)

    return parser


def main(argv=None) -> int:
    _pin_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(f"fdm: error: {err}", file=sys.stderr)
        return EXIT_USAGE

    from .experiments import PrivacyAuditError, StageError
    from .federation import ArtifactError
    from .nn.codec import CodecError

    verification = (ArtifactError, CodecError, PrivacyAuditError)
    try:
        return int(args.func(args))
    except verification as err:
        print(f"fdm: verification failure: {err}", file=sys.stderr)
        return EXIT_VERIFICATION
    except StageError as err:
        print(f"fdm: error: {err}", file=sys.stderr)
        return EXIT_VERIFICATION if isinstance(err.cause, verification) else EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as err:  # noqa: BLE001 - CLI boundary maps to exit code
        print(f"fdm: error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
