"""One-vs-all top-k evaluation and database-size curves.

Each test annotation queries against every other test annotation of its
species; a hit at rank k means a same-identity annotation appears among
the k nearest by cosine distance (ties by annotation id). Rather than
materializing sorted lists, the rank of the first correct match is
computed by counting rows that order strictly before the best positive,
with float64 re-scoring inside the float32 error band so the result is
identical to a full exact sort.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .catalog import IdentityKey
from .errors import DisjointSpecies, EmptyStore, ValidationError
from .store import (
    CappedEligibility,
    EmbeddingStore,
    _group_rows,
    _screen_slack,
    capped_eligibility,
)


@dataclass(frozen=True)
class EvalConfig:
    ranks: tuple[int, ...] = (1, 5, 10, 20)
    caps: tuple[float, ...] | None = None
    skip_queries_without_positives: bool = True

    def __post_init__(self):
        if not self.ranks:
            raise ValidationError("ranks must be non-empty")
        if list(self.ranks) != sorted(set(self.ranks)) or self.ranks[0] < 1:
            raise ValidationError("ranks must be strictly increasing and >= 1")


@dataclass(frozen=True)
class SpeciesEval:
    """Evaluation result for one species' test store."""

    species: str
    accuracy: Mapping[int, float | None]  # k -> hits / n_queries
    n_queries: int
    n_skipped: int
    # (query_id, 1-based rank of first correct match, None when no positive)
    details: tuple[tuple[str, int | None], ...]


@dataclass(frozen=True)
class CurvePoint:
    cap: float
    mean_top1: float
    std_top1: float  # population std across species


@dataclass(frozen=True)
class EvalReport:
    ranks: tuple[int, ...]
    species: Mapping[str, SpeciesEval]
    macro: Mapping[int, float | None]  # unweighted mean over species
    curves: tuple[CurvePoint, ...] = ()
    errors: Mapping[str, str] = field(default_factory=dict)
    metadata: Mapping[str, object] = field(default_factory=dict)


def _first_correct_rank(
    store: EmbeddingStore,
    row: int,
    d32_row: np.ndarray,
    positives: np.ndarray,
    eligible: np.ndarray | None,
) -> int:
    """1-based rank of the best same-identity row under (distance, id)."""
    d64p = store.refine_distances(row, positives)
    p_ranks = store.id_rank[positives]
    best_idx = min(range(len(positives)), key=lambda i: (d64p[i], p_ranks[i]))
    best_d, best_rank = float(d64p[best_idx]), int(p_ranks[best_idx])

    d32 = d32_row.copy()
    d32[row] = np.inf
    if eligible is not None:
        d32[~eligible] = np.inf
    slack = 2.0 * _screen_slack(store.dim)
    count = int((d32 < best_d - slack).sum())
    band = np.nonzero(np.abs(d32 - best_d) <= slack)[0]
    if band.size:
        d64b = store.refine_distances(row, band)
        b_ranks = store.id_rank[band]
        count += int(
            sum(
                1
                for d, r in zip(d64b.tolist(), b_ranks.tolist())
                if (d, r) < (best_d, best_rank)
            )
        )
    return count + 1


def one_vs_all(
    store: EmbeddingStore,
    identity_of: Mapping[str, IdentityKey],
    cfg: EvalConfig = EvalConfig(),
    max_per_identity: float | None = None,
    cap_seed: int = 0,
    block_rows: int = 256,
) -> SpeciesEval:
    """Evaluate every row of the store against all other rows.

    Queries whose identity has no other annotation in the (possibly
    capped) reference set are skipped and counted in ``n_skipped`` when
    configured, otherwise scored as misses.
    """
    n = len(store)
    if n == 0:
        raise EmptyStore(f"empty store for species {store.species!r}")
    groups = _group_rows(store, identity_of)
    row_identity = {i: key for key, rows in groups.items() for i in rows}

    elig: CappedEligibility | None = None
    if max_per_identity is not None and math.isfinite(max_per_identity):
        elig = capped_eligibility(store, identity_of, int(max_per_identity), cap_seed)

    details: list[tuple[str, int | None]] = []
    hits = {k: 0 for k in cfg.ranks}
    n_queries = 0
    n_skipped = 0

    matrix = store.matrix
    for start in range(0, n, block_rows):
        stop = min(start + block_rows, n)
        d32_block = 1.0 - matrix[start:stop] @ matrix.T
        for row in range(start, stop):
            mask = elig.mask_for_query(row) if elig is not None else None
            same = groups[row_identity[row]]
            if mask is None:
                positives = np.array([i for i in same if i != row], dtype=np.int64)
            else:
                positives = np.array([i for i in same if mask[i]], dtype=np.int64)
            if positives.size == 0:
                details.append((store.ids[row], None))
                if cfg.skip_queries_without_positives:
                    n_skipped += 1
                else:
                    n_queries += 1
                continue
            rank = _first_correct_rank(
                store, row, d32_block[row - start], positives, mask
            )
            details.append((store.ids[row], rank))
            n_queries += 1
            for k in cfg.ranks:
                if rank <= k:
                    hits[k] += 1

    accuracy: dict[int, float | None] = {
        k: (hits[k] / n_queries if n_queries else None) for k in cfg.ranks
    }
    return SpeciesEval(
        species=store.species,
        accuracy=accuracy,
        n_queries=n_queries,
        n_skipped=n_skipped,
        details=tuple(details),
    )


def build_report(
    evals: Iterable[SpeciesEval],
    ranks: tuple[int, ...],
    curves: tuple[CurvePoint, ...] = (),
    errors: Mapping[str, str] | None = None,
    metadata: Mapping[str, object] | None = None,
) -> EvalReport:
    """Aggregate per-species results; macro mean is unweighted by species."""
    species = {e.species: e for e in evals}
    macro: dict[int, float | None] = {}
    for k in ranks:
        vals = [e.accuracy[k] for e in species.values() if e.accuracy[k] is not None]
        macro[k] = sum(vals) / len(vals) if vals else None
    meta = {"macro_averaging": "uniform-per-species"}
    meta.update(metadata or {})
    return EvalReport(
        ranks=ranks,
        species=species,
        macro=macro,
        curves=curves,
        errors=dict(errors or {}),
        metadata=meta,
    )


def curve_by_cap(
    stores: EmbeddingStore | Mapping[str, EmbeddingStore],
    identity_of: Mapping[str, IdentityKey],
    caps: Sequence[float] | None = None,
    cap_seed: int = 0,
    cfg: EvalConfig = EvalConfig(),
) -> tuple[CurvePoint, ...]:
    """Mean/std of per-species top-1 as the per-identity database cap varies.

    A non-finite cap means no cap (equals plain one_vs_all). Std is the
    population standard deviation across species. ``caps`` falls back to
    ``cfg.caps``.
    """
    if caps is None:
        caps = cfg.caps
    if not caps:
        raise ValidationError("caps must be non-empty")
    for m in caps:
        if math.isfinite(m) and m < 1:
            raise ValidationError("caps must be >= 1")
    if isinstance(stores, EmbeddingStore):
        stores = {stores.species: stores}
    points = []
    for m in caps:
        top1 = []
        for species in sorted(stores):
            res = one_vs_all(
                stores[species],
                identity_of,
                cfg=cfg,
                max_per_identity=(m if math.isfinite(m) else None),
                cap_seed=cap_seed,
            )
            acc = res.accuracy.get(1)
            if acc is not None:
                top1.append(acc)
        if not top1:
            raise EmptyStore("no species produced a top-1 value")
        arr = np.asarray(top1, dtype=np.float64)
        points.append(
            CurvePoint(cap=float(m), mean_top1=float(arr.mean()),
                       std_top1=float(arr.std()))
        )
    return tuple(points)


@dataclass(frozen=True)
class ComparisonRow:
    species: str
    a: float
    b: float
    delta: float


@dataclass(frozen=True)
class ReportComparison:
    """Side-by-side accuracy table: one row per species, columns for each
    compared report plus their delta, grouped by rank."""

    rows: Mapping[int, tuple[ComparisonRow, ...]]
    macro_delta: Mapping[int, float]

    def to_csv(self, provenance_line: str | None = None) -> str:
        buf = io.StringIO()
        if provenance_line:
            buf.write(f"# {provenance_line}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["species", "k", "a_accuracy", "b_accuracy", "delta"])
        for k in sorted(self.rows):
            for row in self.rows[k]:
                writer.writerow([row.species, k, row.a, row.b, row.delta])
        return buf.getvalue()


def compare_reports(a: EvalReport, b: EvalReport) -> ReportComparison:
    """Per-species deltas (a - b) on the species intersection, plus the
    unweighted macro delta per rank."""
    shared = sorted(set(a.species) & set(b.species))
    if not shared:
        raise DisjointSpecies("reports share no species")
    ranks = sorted(set(a.ranks) & set(b.ranks))
    if not ranks:
        raise ValidationError("reports share no ranks")
    rows: dict[int, tuple[ComparisonRow, ...]] = {}
    macro_delta: dict[int, float] = {}
    for k in ranks:
        krows = []
        for sp in shared:
            av = a.species[sp].accuracy.get(k)
            bv = b.species[sp].accuracy.get(k)
            if av is None or bv is None:
                continue
            krows.append(ComparisonRow(species=sp, a=av, b=bv, delta=av - bv))
        if krows:
            rows[k] = tuple(krows)
            macro_delta[k] = sum(r.delta for r in krows) / len(krows)
    if not rows:
        raise ValidationError("no overlapping species have values at shared ranks")
    return ReportComparison(rows=rows, macro_delta=macro_delta)


def report_to_json(report: EvalReport, provenance: Mapping[str, object]) -> str:
    obj = {
        "provenance": dict(provenance),
        "metadata": dict(report.metadata),
        "ranks": list(report.ranks),
        "species": {
            sp: {
                "accuracy": {str(k): v for k, v in e.accuracy.items()},
                "n_queries": e.n_queries,
                "n_skipped": e.n_skipped,
                "per_query": [[qid, rank] for qid, rank in e.details],
            }
            for sp, e in sorted(report.species.items())
        },
        "macro": {str(k): v for k, v in report.macro.items()},
        "curves": [
            {"cap": p.cap, "mean_top1": p.mean_top1, "std_top1": p.std_top1}
            for p in report.curves
        ],
        "errors": dict(sorted(report.errors.items())),
    }
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def report_from_json(text: str) -> EvalReport:
    obj = json.loads(text)
    species = {
        sp: SpeciesEval(
            species=sp,
            accuracy={int(k): v for k, v in rec["accuracy"].items()},
            n_queries=rec["n_queries"],
            n_skipped=rec["n_skipped"],
            details=tuple((q, r) for q, r in rec.get("per_query", [])),
        )
        for sp, rec in obj["species"].items()
    }
    return EvalReport(
        ranks=tuple(obj["ranks"]),
        species=species,
        macro={int(k): v for k, v in obj["macro"].items()},
        curves=tuple(
            CurvePoint(cap=c["cap"], mean_top1=c["mean_top1"], std_top1=c["std_top1"])
            for c in obj.get("curves", [])
        ),
        errors=obj.get("errors", {}),
        metadata=obj.get("metadata", {}),
    )


def report_summary_csv(report: EvalReport, provenance_line: str) -> str:
    buf = io.StringIO()
    buf.write(f"# {provenance_line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["species", "k", "accuracy", "n_queries", "n_skipped"])
    for sp in sorted(report.species):
        e = report.species[sp]
        for k in report.ranks:
            writer.writerow([sp, k, e.accuracy[k], e.n_queries, e.n_skipped])
    return buf.getvalue()


def curve_csv(points: Sequence[CurvePoint], provenance_line: str) -> str:
    buf = io.StringIO()
    buf.write(f"# {provenance_line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["cap", "mean_top1", "std_top1"])
    for p in points:
        writer.writerow([p.cap, p.mean_top1, p.std_top1])
    return buf.getvalue()
