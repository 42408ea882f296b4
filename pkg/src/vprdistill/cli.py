"""Command-line interface.

Subcommands: synth, train-teacher, distill, extract, eval. Every command
locks its output directory for the duration of the run, writes the
effective merged configuration next to its artifacts, and logs line-
oriented key=value records (no timestamps, so identical runs produce
identical outputs). Exit codes: 0 success, 2 validation/usage error,
1 runtime error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import os
import sys

import yaml

from . import config as config_mod
from . import plots
from .data import (ArchiveFeatureSource, generate_synthetic, export_features,
                   load_manifest)
from .backbone import SmallViT
from .errors import FormatError, ValidationError
from .retrieval import (DescriptorStore, GeoTruth, PairTruth, RetrievalIndex,
                        fit_pca, knn_search, load_descriptor_store, project,
                        recall_at_n, save_descriptor_store)
from .training import (PHASE_STUDENT, extract_descriptors, distill_student,
                       load_checkpoint, save_checkpoint, train_teacher)


@contextlib.contextmanager
def locked_output_dir(path):
    os.makedirs(path, exist_ok=True)
    lock = os.path.join(path, ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"output directory {path} is locked by another run "
                           f"(remove {lock} if stale)") from None
    os.close(fd)
    try:
        yield path
    finally:
        os.remove(lock)


def format_record(record: dict) -> str:
    return " ".join(f"{key}={value}" for key, value in record.items())


class RunLog:
    """Echoes key=value records to stdout and collects them for the log file."""

    def __init__(self):
        self.lines = []

    def record(self, **fields):
        line = format_record(fields)
        self.lines.append(line)
        print(line)

    def write(self, path):
        with open(path, "w") as fh:
            for line in self.lines:
                fh.write(line + "\n")


def _parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ValidationError(f"--set expects dotted.key=value, got {text!r}")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def build_run_config(args, base=None) -> config_mod.RunConfig:
    cfg = base if base is not None else config_mod.RunConfig()
    if getattr(args, "config", None):
        cfg = config_mod.load_config_file(args.config)
    overrides = {}
    for text in getattr(args, "set", None) or []:
        key, value = _parse_override(text)
        overrides[key] = value
    for flag, dotted in (("epochs_teacher", "train.epochs_teacher"),
                         ("epochs_student", "train.epochs_student"),
                         ("lr0", "train.lr0"), ("train_seed", "train.seed"),
                         ("gamma", "train.weights.gamma"), ("eta", "train.weights.eta")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[dotted] = value
    if overrides:
        cfg = config_mod.apply_overrides(cfg, overrides)
    return cfg


def _data_paths(args) -> tuple[str, str]:
    manifest = os.path.join(args.data, args.manifest)
    features = os.path.join(args.data, "features")
    if not os.path.exists(manifest):
        raise ValidationError(f"manifest not found: {manifest}")
    if not os.path.isdir(features):
        raise ValidationError(f"feature archive not found: {features}")
    return manifest, features


def _feature_source(cfg: config_mod.RunConfig, features_dir) -> ArchiveFeatureSource:
    expected = (cfg.backbone.embed_dim, cfg.backbone.grid, cfg.backbone.grid)
    return ArchiveFeatureSource(features_dir, cfg.tapped_layers(), expected_shape=expected)


def cmd_synth(args) -> int:
    cfg = build_run_config(args)
    dataset = generate_synthetic(seed=args.seed, n_places=args.places,
                                 per_place=args.per_place, noise=args.noise,
                                 drift=args.drift, image_size=cfg.backbone.image_size)
    if args.queries_per_place >= args.per_place:
        raise ValidationError("queries-per-place must be smaller than per-place")
    with locked_output_dir(args.out) as out:
        log = RunLog()
        backbone = SmallViT(cfg.backbone)
        manifest_path, archive_dir = export_features(dataset, backbone, out)
        n_query = args.queries_per_place
        db_records = [r for r in dataset.records if int(r.image_ref.split("_i")[1]) < args.per_place - n_query]
        q_records = [r for r in dataset.records if int(r.image_ref.split("_i")[1]) >= args.per_place - n_query]
        for name, records in (("manifest_database.csv", db_records),
                              ("manifest_queries.csv", q_records)):
            with open(os.path.join(out, name), "w", newline="") as fh:
                writer = csv.writer(fh)
                for rec in records:
                    writer.writerow([rec.image_ref, rec.place_id, rec.coord_system,
                                     repr(float(rec.c1)), repr(float(rec.c2))])
        config_mod.save_config_file(os.path.join(out, "config_used.yaml"), cfg)
        log.record(command="synth", seed=args.seed, places=args.places,
                   per_place=args.per_place, noise=args.noise, drift=args.drift,
                   images=len(dataset.records), manifest=manifest_path,
                   features=archive_dir, queries_per_place=n_query)
        log.write(os.path.join(out, "synth.log"))
    return 0


def cmd_train_teacher(args) -> int:
    resume = load_checkpoint(args.resume) if args.resume else None
    base = config_mod.run_config_from_checkpoint(resume) if resume else None
    cfg = build_run_config(args, base=base)
    manifest, features = _data_paths(args)
    dataset = load_manifest(manifest)
    source = _feature_source(cfg, features)
    with locked_output_dir(args.out) as out:
        log = RunLog()
        log.record(command="train-teacher", seed=cfg.train.seed, data=args.data,
                   manifest=args.manifest, epochs=cfg.train.epochs_teacher,
                   resume=args.resume or "none", deterministic=cfg.deterministic)
        ckpt = train_teacher(cfg, dataset, source, resume=resume,
                             progress=lambda entry: log.record(**entry))
        ckpt_dir = os.path.join(out, "checkpoint")
        save_checkpoint(ckpt_dir, ckpt)
        config_mod.save_config_file(os.path.join(out, "config_used.yaml"), cfg)
        plots.save_loss_curves(ckpt.history, os.path.join(out, "loss_curve.png"),
                               "teacher training loss")
        log.record(checkpoint=ckpt_dir, final_loss=ckpt.history[-1]["loss"])
        log.write(os.path.join(out, "train_teacher.log"))
    return 0


def cmd_distill(args) -> int:
    teacher_ckpt = load_checkpoint(args.teacher)
    base = config_mod.run_config_from_checkpoint(teacher_ckpt)
    cfg = build_run_config(args, base=base)
    manifest, features = _data_paths(args)
    dataset = load_manifest(manifest)
    source = _feature_source(cfg, features)
    with locked_output_dir(args.out) as out:
        log = RunLog()
        log.record(command="distill", seed=cfg.train.seed, data=args.data,
                   manifest=args.manifest, teacher=args.teacher,
                   epochs=cfg.train.epochs_student, gamma=cfg.train.weights.gamma,
                   eta=cfg.train.weights.eta, deterministic=cfg.deterministic)
        ckpt = distill_student(cfg, dataset, source, teacher_ckpt,
                               progress=lambda entry: log.record(**entry))
        ckpt_dir = os.path.join(out, "checkpoint")
        save_checkpoint(ckpt_dir, ckpt)
        config_mod.save_config_file(os.path.join(out, "config_used.yaml"), cfg)
        plots.save_loss_curves(ckpt.history, os.path.join(out, "loss_curve.png"),
                               "student distillation loss")
        log.record(checkpoint=ckpt_dir, final_loss=ckpt.history[-1]["loss"])
        log.write(os.path.join(out, "distill.log"))
    return 0


def cmd_extract(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model, cfg = config_mod.model_from_checkpoint(ckpt)
    manifest, features = _data_paths(args)
    dataset = load_manifest(manifest)
    source = _feature_source(cfg, features)
    if ckpt.phase == PHASE_STUDENT:
        if args.batch is not None and args.batch != 1:
            print("note: student descriptors are batch-invariant; extracting one image at a time")
        batch = 1
    else:
        batch = args.batch if args.batch is not None else 8
    with locked_output_dir(args.out) as out:
        log = RunLog()
        descriptors = extract_descriptors(model, dataset.records, source, batch_size=batch)
        store = DescriptorStore(
            ids=[rec.image_ref for rec in dataset.records],
            descriptors=descriptors,
            coords=[(rec.coord_system, rec.c1, rec.c2) for rec in dataset.records])
        store_path = os.path.join(out, "descriptors.scvd")
        save_descriptor_store(store_path, store)
        config_mod.save_config_file(os.path.join(out, "config_used.yaml"), cfg)
        log.record(command="extract", checkpoint=args.checkpoint, phase=ckpt.phase,
                   variant=ckpt.variant, batch=batch, records=len(dataset.records),
                   dim=descriptors.shape[1], store=store_path, seed=cfg.train.seed)
        log.write(os.path.join(out, "extract.log"))
    return 0


def _load_pairs(path) -> PairTruth:
    mapping = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise FormatError(f"{path}:{lineno}: expected query_id,database_id")
            query = row[0].strip()
            if query in mapping:
                raise FormatError(f"{path}:{lineno}: duplicate pair for query {query!r}")
            mapping[query] = row[1].strip()
    if not mapping:
        raise FormatError(f"{path}: no pairs found")
    return PairTruth(mapping)


def cmd_eval(args) -> int:
    queries = load_descriptor_store(args.queries)
    database = load_descriptor_store(args.database)
    n_values = sorted(set(int(tok) for tok in args.n.split(",") if tok.strip()))
    if not n_values:
        raise ValidationError("--n must list at least one positive integer")
    if args.truth == "pairs":
        if not args.pairs:
            raise ValidationError("--truth pairs requires --pairs FILE")
        truth = _load_pairs(args.pairs)
    else:
        truth = GeoTruth(query_coords=queries.coord_map(), db_coords=database.coord_map())
    q_mat, db_mat = queries.descriptors, database.descriptors
    if args.pca_dim is not None:
        if args.pca_dim < 1 or args.pca_dim >= len(database.ids):
            raise ValidationError(
                f"--pca-dim must be in [1, database size); got {args.pca_dim} "
                f"with {len(database.ids)} database descriptors")
        model = fit_pca(db_mat, args.pca_dim)  # database only; queries are unseen
        db_mat = project(model, db_mat)
        q_mat = project(model, q_mat)
    index = RetrievalIndex(ids=database.ids, descriptors=db_mat)
    ranked = knn_search(index, q_mat, max(n_values))
    results = dict(zip(queries.ids, ranked))
    recalls = recall_at_n(results, truth, n_values, threshold_m=args.threshold)
    with locked_output_dir(args.out) as out:
        log = RunLog()
        log.record(command="eval", queries=args.queries, database=args.database,
                   truth=args.truth, pca_dim=args.pca_dim if args.pca_dim else "none",
                   threshold_m=args.threshold, query_count=len(queries.ids),
                   database_count=len(database.ids))
        report_lines = [f"queries={len(queries.ids)}", f"database={len(database.ids)}",
                        f"truth={args.truth}", f"threshold_m={args.threshold}",
                        f"pca_dim={args.pca_dim if args.pca_dim else 'none'}"]
        print(f"{'N':>4}  recall")
        for n in n_values:
            print(f"{n:>4}  {recalls[n]:7.3f}")
            report_lines.append(f"recall@{n}={recalls[n]!r}")
        with open(os.path.join(out, "report.txt"), "w") as fh:
            fh.write("\n".join(report_lines) + "\n")
        plots.save_recall_curve(recalls, os.path.join(out, "recall_curve.png"),
                                "retrieval recall")
        log.record(report=os.path.join(out, "report.txt"),
                   **{f"recall_at_{n}": recalls[n] for n in n_values})
        log.write(os.path.join(out, "eval.log"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vprdistill",
        description="Place-recognition descriptors: teacher training, student "
                    "distillation, extraction and retrieval evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p, training=False):
        p.add_argument("--config", help="YAML run-config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config value by dotted key (repeatable)")
        if training:
            p.add_argument("--lr0", type=float, help="initial learning rate")
            p.add_argument("--seed", type=int, dest="train_seed", help="training seed")

    p = sub.add_parser("synth", help="generate a synthetic dataset and its feature archive")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--places", type=int, default=16)
    p.add_argument("--per-place", type=int, default=6)
    p.add_argument("--queries-per-place", type=int, default=2,
                   help="images per place reserved for the query split")
    p.add_argument("--noise", type=float, default=0.08)
    p.add_argument("--drift", type=int, default=2)
    add_config_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-teacher", help="phase one: train the cross-image teacher")
    p.add_argument("--data", required=True, help="directory with manifest + features/")
    p.add_argument("--manifest", default="manifest.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, dest="epochs_teacher")
    p.add_argument("--resume", help="teacher checkpoint directory to continue from")
    add_config_flags(p, training=True)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="phase two: distill the single-image student")
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", default="manifest.csv")
    p.add_argument("--teacher", required=True, help="teacher checkpoint directory")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, dest="epochs_student")
    p.add_argument("--gamma", type=float)
    p.add_argument("--eta", type=float)
    add_config_flags(p, training=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("extract", help="extract a descriptor store for a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", default="manifest.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--batch", type=int,
                   help="teacher batch size (students always run one image at a time)")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="retrieval evaluation: PCA, kNN, Recall@N")
    p.add_argument("--queries", required=True, help="query descriptor store")
    p.add_argument("--database", required=True, help="database descriptor store")
    p.add_argument("--out", required=True)
    p.add_argument("--n", default="1,5,10", help="comma-separated recall cutoffs")
    p.add_argument("--pca-dim", type=int, dest="pca_dim")
    p.add_argument("--truth", choices=("geo", "pairs"), default="geo")
    p.add_argument("--pairs", help="CSV query_id,database_id file for --truth pairs")
    p.add_argument("--threshold", type=float, default=25.0,
                   help="geographic match threshold in metres (inclusive)")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
