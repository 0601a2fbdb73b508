#!/usr/bin/env python3
"""End-to-end demo: train the toy model, evaluate, sweep database caps.

Writes everything under ./toy_pipeline_out (or --out) and prints the
per-rank accuracies plus the cap curve. The whole run is deterministic
under --seed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from mreid.cli import main as mreid_main
from mreid.evaluator import report_from_json


def run(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="toy_pipeline_out")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=40)
    args = parser.parse_args(argv)

    out = Path(args.out)
    toy = out / "toy"
    print(f"== train-toy (epochs={args.epochs}, seed={args.seed})")
    code = mreid_main([
        "train-toy", "--out", str(toy),
        "--epochs", str(args.epochs), "--seed", str(args.seed),
    ])
    if code:
        return code

    common = [
        "--manifest", str(toy / "manifest.csv"),
        "--policy", str(toy / "policy.json"),
        "--assignment", str(toy / "assignment.csv"),
        "--embeddings", str(toy / "embeddings.mreid"),
    ]
    print("== eval")
    code = mreid_main(["eval", *common, "--out", str(out / "eval")])
    if code:
        return code
    print("== curve")
    code = mreid_main([
        "curve", *common, "--caps", "1,2,3,5,10,inf",
        "--out", str(out / "curve"),
    ])
    if code:
        return code

    report = report_from_json((out / "eval" / "eval_report.json").read_text())
    top1 = report.species["toy"].accuracy[1]
    print(f"== done: held-out top-1 {top1:.4f}; outputs in {out}/")
    return 0


if __name__ == "__main__":
    sys.exit(run())
