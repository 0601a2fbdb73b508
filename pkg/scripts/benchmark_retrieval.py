#!/usr/bin/env python3
"""Retrieval throughput benchmark across store sizes.

Reports store build time, single-query top-20 latency, and full
one-vs-all evaluation time. Sizes default to the scales that matter:
5,000 rows (mid-size species) and 30,063 rows (largest per-species test
database in the corpus).
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from mreid.catalog import IdentityKey
from mreid.evaluator import EvalConfig, one_vs_all
from mreid.store import build_store, topk


def bench(n: int, dim: int, evaluate: bool) -> None:
    rng = np.random.default_rng(0)
    mat = rng.standard_normal((n, dim), dtype=np.float32)
    ids = [f"a{i:06d}" for i in range(n)]

    t0 = time.perf_counter()
    store = build_store(dict(zip(ids, mat)), "bench")
    t_build = time.perf_counter() - t0

    topk(store, ids[0], 20)  # warm
    times = []
    for q in ids[:: max(1, n // 10)][:10]:
        t0 = time.perf_counter()
        topk(store, q, 20)
        times.append(time.perf_counter() - t0)
    t_query = float(np.median(times)) * 1000

    line = f"n={n:6d} dim={dim:5d}  build {t_build:6.2f}s  top-20 {t_query:7.2f}ms"
    if evaluate:
        ident = {a: IdentityKey("bench", f"i{j // 4}") for j, a in enumerate(ids)}
        t0 = time.perf_counter()
        one_vs_all(store, ident, EvalConfig(ranks=(1, 5, 10, 20)))
        line += f"  one-vs-all {time.perf_counter() - t0:6.2f}s"
    print(line)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dim", type=int, default=2048)
    parser.add_argument(
        "--sizes", default="1000,5000,30063",
        help="comma-separated store sizes",
    )
    parser.add_argument(
        "--max-eval-rows", type=int, default=5000,
        help="skip full one-vs-all above this size",
    )
    args = parser.parse_args()
    for n in (int(s) for s in args.sizes.split(",")):
        bench(n, args.dim, evaluate=n <= args.max_eval_rows)


if __name__ == "__main__":
    main()
