"""CLI: ``reid-export export --manifest --images --model --size --out``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import ExporterError
from .export import ExportJob, export_embeddings


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reid-export", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="extract embeddings for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--images", required=True, help="image root directory")
    p.add_argument("--model", required=True,
                   help="torchvision:<arch>[:<weights>] | torchscript:<path> | hf:<repo>")
    p.add_argument("--size", type=int, default=440)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--out", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    job = ExportJob(
        manifest=Path(args.manifest),
        image_root=Path(args.images),
        model=args.model,
        out=Path(args.out),
        size=args.size,
        batch_size=args.batch_size,
    )
    try:
        provenance = export_embeddings(job)
    except (ExporterError, OSError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(
        f"wrote {provenance['rows']} vectors of dim {provenance['dim']} "
        f"to {args.out}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
