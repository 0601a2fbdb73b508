"""Command-line entry point: ingest, split, eval, curve, train-toy, report.

Every subcommand is deterministic given (inputs, flags, seed): output
files carry a provenance header (tool version, config digest, seed) and
contain no timestamps, so reruns are byte-identical. Exit codes:
0 success, 1 runtime error, 2 validation error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .arcface import LrSchedule, MarginPolicy
from .catalog import Catalog, catalog_stats, load_policies, parse_manifest
from .errors import MissingEmbedding, ReidError, ValidationError
from .evaluator import (
    EvalConfig,
    build_report,
    compare_reports,
    curve_by_cap,
    curve_csv,
    one_vs_all,
    report_from_json,
    report_summary_csv,
    report_to_json,
)
from .splitter import SplitConfig, assign_split, read_assignment_csv, split_report
from .store import (
    MAGIC,
    build_store,
    read_embeddings,
    read_embeddings_jsonl,
    write_embeddings,
)
from .toy import make_cluster_dataset, split_holdout, toy_train


def _worker_count() -> int:
    env = os.environ.get("REID_THREADS")
    if env:
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def _digest(obj: object) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, default=str).encode()
    ).hexdigest()[:16]


def _provenance(config_digest: str, seed: int | None) -> dict[str, object]:
    return {
        "tool": "mreid",
        "version": __version__,
        "config_digest": config_digest,
        "seed": seed,
    }


def _provenance_line(config_digest: str, seed: int | None) -> str:
    return f"mreid {__version__} config={config_digest} seed={seed}"


def _load_catalog(args) -> Catalog:
    policies = {}
    if getattr(args, "policy", None):
        policies = load_policies(Path(args.policy).read_text())
    path = Path(args.manifest)
    fmt = "jsonl" if path.suffix == ".jsonl" else "csv"
    return parse_manifest(path.read_text(), fmt, policies)


def _load_embedding_files(paths: list[str]) -> dict[str, np.ndarray]:
    vectors: dict[str, np.ndarray] = {}
    for path in paths:
        with open(path, "rb") as fh:
            head = fh.read(8)
        loaded = (
            read_embeddings(path)
            if head == MAGIC
            else read_embeddings_jsonl(Path(path).read_text())
        )
        for ann_id, vec in loaded.items():
            if ann_id in vectors:
                raise ValidationError(f"id {ann_id!r} appears in multiple files")
            vectors[ann_id] = vec
    return vectors


def cmd_ingest(args) -> int:
    cat = _load_catalog(args)
    stats = catalog_stats(cat)
    print(f"annotations: {len(cat.annotations)}  species: {len(stats)}")
    for species in sorted(stats):
        rec = stats[species]
        print(
            f"{species}: {rec['annotation_count']} annotations, "
            f"{rec['individual_count']} individuals, "
            f"mean {rec['annotations_per_individual_mean']:.2f} / "
            f"median {rec['annotations_per_individual_median']} per individual"
        )
    return 0


def cmd_split(args) -> int:
    cat = _load_catalog(args)
    if args.config:
        cfg = SplitConfig.from_json(Path(args.config).read_text())
    else:
        cfg = SplitConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    assignment = assign_split(cat, cfg, allow_too_small=True)
    for species in assignment.too_small:
        print(f"warning: species too small, no test identities: {species}",
              file=sys.stderr)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "assignment.csv").write_text(assignment.to_csv())
    report = {
        "provenance": _provenance(cfg.digest(), cfg.seed),
        "config": json.loads(cfg.to_json()),
        "species": split_report(assignment),
        "too_small": list(assignment.too_small),
    }
    (out / "split_report.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n"
    )
    print(f"wrote {out / 'assignment.csv'} and {out / 'split_report.json'}")
    return 0


def _species_test_stores(cat, labels, vectors, allow_missing):
    """Per-species embedding stores over test-labelled annotations."""
    test_ids = [
        a.annotation_id for a in cat.annotations
        if labels.get(a.annotation_id) == "test"
    ]
    missing = [i for i in test_ids if i not in vectors]
    if missing and not allow_missing:
        raise MissingEmbedding(missing)
    by_species: dict[str, dict[str, np.ndarray]] = {}
    for a in cat.annotations:
        if labels.get(a.annotation_id) != "test":
            continue
        if a.annotation_id not in vectors:
            continue
        by_species.setdefault(a.species, {})[a.annotation_id] = vectors[a.annotation_id]
    stores = {
        sp: build_store(vecs, sp) for sp, vecs in by_species.items() if vecs
    }
    return stores, missing


def cmd_eval(args) -> int:
    cat = _load_catalog(args)
    labels = read_assignment_csv(Path(args.assignment).read_text())
    vectors = _load_embedding_files(args.embeddings)
    stores, missing = _species_test_stores(cat, labels, vectors, args.allow_missing)
    if missing:
        shown = ", ".join(missing[:5]) + (" ..." if len(missing) > 5 else "")
        print(f"warning: {len(missing)} test annotations lack embeddings: {shown}",
              file=sys.stderr)

    ranks = tuple(int(r) for r in args.ranks.split(","))
    cfg = EvalConfig(ranks=ranks, skip_queries_without_positives=not args.score_skips)
    identity_of = cat.identity_map()
    evals, errors = [], {}

    def run(species):
        return one_vs_all(stores[species], identity_of, cfg)

    with concurrent.futures.ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        futures = {sp: pool.submit(run, sp) for sp in sorted(stores)}
        for sp in sorted(futures):
            try:
                evals.append(futures[sp].result())
            except ReidError as exc:
                errors[sp] = f"{type(exc).__name__}: {exc}"

    digest = _digest({"ranks": ranks, "skip": cfg.skip_queries_without_positives})
    report = build_report(
        evals, ranks, errors=errors,
        metadata={"missing_embeddings": len(missing)},
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(
        report_to_json(report, _provenance(digest, None))
    )
    (out / "eval_summary.csv").write_text(
        report_summary_csv(report, _provenance_line(digest, None))
    )
    for sp in sorted(report.species):
        acc = report.species[sp].accuracy
        shown = " ".join(f"top{k}={acc[k]:.4f}" for k in ranks if acc[k] is not None)
        print(f"{sp}: {shown}")
    for k in ranks:
        if report.macro[k] is not None:
            print(f"macro top{k}: {report.macro[k]:.4f}")
    if errors:
        for sp, msg in sorted(errors.items()):
            print(f"error: {sp}: {msg}", file=sys.stderr)
        return 1
    return 0


def cmd_curve(args) -> int:
    cat = _load_catalog(args)
    labels = read_assignment_csv(Path(args.assignment).read_text())
    vectors = _load_embedding_files(args.embeddings)
    stores, missing = _species_test_stores(cat, labels, vectors, args.allow_missing)
    if missing:
        print(f"warning: {len(missing)} test annotations lack embeddings",
              file=sys.stderr)
    caps = tuple(
        math.inf if c.strip() in ("inf", "none") else float(c)
        for c in args.caps.split(",")
    )
    identity_of = cat.identity_map()
    points = curve_by_cap(stores, identity_of, caps, cap_seed=args.cap_seed)
    digest = _digest({"caps": [repr(c) for c in caps], "cap_seed": args.cap_seed})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "curve.csv").write_text(
        curve_csv(points, _provenance_line(digest, args.cap_seed))
    )
    for p in points:
        print(f"cap={p.cap}: mean_top1={p.mean_top1:.4f} std={p.std_top1:.4f}")
    return 0


def cmd_train_toy(args) -> int:
    policy = MarginPolicy(
        m_min=args.margin_min, m_max=args.margin_max, exponent=args.margin_exponent
    )
    dataset = make_cluster_dataset(
        n_classes=args.classes,
        per_class=args.per_class,
        input_dim=args.input_dim,
        spread=args.spread,
        seed=args.seed,
    )
    train_set, held_out = split_holdout(dataset, args.holdout, seed=args.seed)
    model = toy_train(
        train_set,
        emb_dim=args.dim,
        subcenters=args.subcenters,
        scale=args.scale,
        margin_policy=policy,
        sched=LrSchedule(),
        epochs=args.epochs,
        seed=args.seed,
    )

    config = {
        "epochs": args.epochs, "seed": args.seed, "dim": args.dim,
        "classes": args.classes, "subcenters": args.subcenters,
        "scale": args.scale, "margin_min": args.margin_min,
        "margin_max": args.margin_max, "margin_exponent": args.margin_exponent,
        "per_class": args.per_class, "input_dim": args.input_dim,
        "spread": args.spread, "holdout": args.holdout,
    }
    digest = _digest(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    trace = io.StringIO()
    trace.write(f"# {_provenance_line(digest, args.seed)}\n")
    writer = csv.writer(trace, lineterminator="\n")
    writer.writerow(["epoch", "loss"])
    for epoch, loss in enumerate(model.loss_trace):
        writer.writerow([epoch, repr(loss)])
    (out / "loss_trace.csv").write_text(trace.getvalue())

    emb = model.embed(held_out.features)
    ids = [f"toy-{i:04d}" for i in range(emb.shape[0])]
    write_embeddings(str(out / "embeddings.mreid"), dict(zip(ids, emb)))

    manifest = io.StringIO()
    manifest.write(f"# {_provenance_line(digest, args.seed)}\n")
    writer = csv.writer(manifest, lineterminator="\n")
    writer.writerow(["annotation_id", "species", "individual_id", "viewpoint",
                     "encounter_id", "image_ref"])
    for ann_id, label in zip(ids, held_out.labels.tolist()):
        writer.writerow([ann_id, "toy", f"c{label}", "unknown", ann_id, ""])
    (out / "manifest.csv").write_text(manifest.getvalue())

    assignment = io.StringIO()
    assignment.write(f"# mreid train-toy seed={args.seed} config={digest}\n")
    writer = csv.writer(assignment, lineterminator="\n")
    writer.writerow(["annotation_id", "label", "drop_reason", "identity_disposition"])
    for ann_id in ids:
        writer.writerow([ann_id, "test", "", "known"])
    (out / "assignment.csv").write_text(assignment.getvalue())

    (out / "policy.json").write_text(
        json.dumps({"toy": {"viewpoint_splits_identity": False}}) + "\n"
    )
    print(
        f"trained {args.epochs} epochs; loss {model.loss_trace[0]:.4f} -> "
        f"{model.loss_trace[-1]:.4f}; wrote {out}/"
    )
    return 0


def cmd_report(args) -> int:
    text_a = Path(args.a).read_text()
    text_b = Path(args.b).read_text()
    comparison = compare_reports(report_from_json(text_a), report_from_json(text_b))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = _digest({"a": text_a, "b": text_b})
    (out / "compare.csv").write_text(
        comparison.to_csv(_provenance_line(digest, None))
    )
    for k in sorted(comparison.macro_delta):
        print(f"macro delta top{k}: {comparison.macro_delta[k]:+.4f}")
    return 0


def _add_eval_io(p: argparse.ArgumentParser):
    p.add_argument("--manifest", required=True)
    p.add_argument("--policy", default=None)
    p.add_argument("--assignment", required=True)
    p.add_argument("--embeddings", required=True, nargs="+")
    p.add_argument("--allow-missing", action="store_true")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mreid", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a manifest and print stats")
    p.add_argument("--manifest", required=True)
    p.add_argument("--policy", default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="produce a train/test assignment")
    p.add_argument("--manifest", required=True)
    p.add_argument("--policy", default=None)
    p.add_argument("--config", default=None, help="SplitConfig JSON file")
    p.add_argument("--seed", type=int, default=None, help="overrides config seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("eval", help="one-vs-all evaluation of test embeddings")
    _add_eval_io(p)
    p.add_argument("--ranks", default="1,5,10,20")
    p.add_argument("--score-skips", action="store_true",
                   help="score positive-less queries as misses instead of skipping")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("curve", help="top-1 vs per-identity database cap")
    _add_eval_io(p)
    p.add_argument("--caps", default="1,2,3,5,10,inf")
    p.add_argument("--cap-seed", type=int, default=0)
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("train-toy", help="desk-scale training pipeline")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--subcenters", type=int, default=3)
    p.add_argument("--scale", type=float, default=51.5)
    p.add_argument("--margin-min", type=float, default=0.05)
    p.add_argument("--margin-max", type=float, default=0.5)
    p.add_argument("--margin-exponent", type=float, default=0.25)
    p.add_argument("--per-class", type=int, default=30)
    p.add_argument("--input-dim", type=int, default=16)
    p.add_argument("--spread", type=float, default=0.15)
    p.add_argument("--holdout", type=float, default=0.2)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("report", help="compare two eval report JSON files")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (ReidError, OSError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
