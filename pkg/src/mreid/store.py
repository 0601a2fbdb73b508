"""Embedding stores and exact cosine-distance retrieval.

Storage is row-major float32 with unit-normalized rows. Ranking is
exact: a BLAS float32 pass screens candidates, then everything within a
conservative error band of the cut is re-scored in float64 and ordered
by (distance, annotation id). The band bound covers worst-case float32
accumulation error, so results equal a full float64 sort while staying
fast enough for tens of thousands of rows per query.

Wire format ``MREID1``: little-endian magic ``MREID1\\0\\0`` (8 bytes),
u32 row count, u32 dim, count*dim float32 row-major, then per row a u16
id length followed by UTF-8 bytes. A JSONL sidecar format (one
``{"id": ..., "vector": [...]}`` per line) is accepted for interop.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, Mapping, Sequence

import numpy as np

from .catalog import IdentityKey
from .errors import (
    DimensionMismatch,
    EmptyStore,
    FormatError,
    UnknownId,
    ValidationError,
    ZeroVector,
)

MAGIC = b"MREID1\x00\x00"


def _screen_slack(dim: int) -> float:
    # worst-case |float32 dot - float64 dot| for unit vectors
    return max(1e-5, 2.4e-7 * dim)


def _clip_distance(values: np.ndarray) -> np.ndarray:
    return np.clip(values, 0.0, 2.0)


@dataclass(frozen=True)
class EmbeddingStore:
    """Unit-normalized embedding matrix for one species, keyed by id."""

    species: str
    dim: int
    ids: tuple[str, ...]
    matrix: np.ndarray  # (n, dim) float32, rows unit-normalized
    id_index: Mapping[str, int]

    def __len__(self) -> int:
        return len(self.ids)

    @cached_property
    def id_rank(self) -> np.ndarray:
        """Lexicographic rank of each row's id; the tie-break key."""
        order = np.argsort(np.asarray(self.ids))
        ranks = np.empty(len(self.ids), dtype=np.int64)
        ranks[order] = np.arange(len(self.ids))
        return ranks

    def screen_distances(self, row: int) -> np.ndarray:
        """Fast float32 distances from one row to all rows (self = +inf)."""
        scores = self.matrix @ self.matrix[row]
        d = 1.0 - scores
        d[row] = np.inf
        return d

    def refine_distances(self, row: int, idxs: np.ndarray) -> np.ndarray:
        """Exact float64 distances from ``row`` to the given rows.

        Computed pair by pair so a pair's value never depends on which
        other rows are being refined alongside it (blocked BLAS products
        can differ in the last ulp with the gather shape, which would
        break strict tie comparisons)."""
        q = self.matrix[row].astype(np.float64)
        scores = np.array(
            [np.dot(self.matrix[i].astype(np.float64), q) for i in np.atleast_1d(idxs)]
        )
        return _clip_distance(1.0 - scores)


def build_store(
    vectors: Mapping[str, Sequence[float] | np.ndarray], species: str
) -> EmbeddingStore:
    """Normalize and pack vectors; insertion order defines row order."""
    if not vectors:
        raise EmptyStore(f"no vectors for species {species!r}")
    ids = tuple(vectors.keys())
    dim = None
    rows = []
    for ann_id in ids:
        v = np.asarray(vectors[ann_id], dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise DimensionMismatch(f"vector for {ann_id!r} must be 1-D and non-empty")
        if dim is None:
            dim = v.size
        elif v.size != dim:
            raise DimensionMismatch(
                f"vector for {ann_id!r} has dim {v.size}, expected {dim}"
            )
        if not np.all(np.isfinite(v)):
            raise ValidationError(f"non-finite vector for {ann_id!r}")
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            raise ZeroVector(ann_id)
        rows.append((v / norm).astype(np.float32))
    matrix = np.ascontiguousarray(np.stack(rows))
    return EmbeddingStore(
        species=species,
        dim=int(dim),  # type: ignore[arg-type]
        ids=ids,
        matrix=matrix,
        id_index={ann_id: i for i, ann_id in enumerate(ids)},
    )


@dataclass(frozen=True)
class RankedMatches:
    """Top-k result for one query: (annotation_id, cosine distance) pairs
    in non-decreasing distance order, query excluded."""

    query_id: str
    entries: tuple[tuple[str, float], ...]
    k: int


def _ordered_candidates(
    store: EmbeddingStore, row: int, cand: np.ndarray
) -> list[tuple[float, int, int]]:
    """(distance64, id_rank, row) triples sorted by the ranking rule."""
    d64 = store.refine_distances(row, cand)
    ranks = store.id_rank[cand]
    triples = sorted(zip(d64.tolist(), ranks.tolist(), cand.tolist()))
    return triples


def _exact_topk(
    store: EmbeddingStore,
    row: int,
    k: int,
    eligible: np.ndarray | None = None,
) -> list[tuple[float, int, int]]:
    """Exact top-k rows by (distance, id); ``eligible`` masks the database."""
    d32 = store.screen_distances(row)
    if eligible is not None:
        d32 = np.where(eligible, d32, np.inf)
    n_eligible = int(np.isfinite(d32).sum())
    kk = min(k, n_eligible)
    if kk == 0:
        return []
    cut = np.partition(d32, kk - 1)[kk - 1]
    cand = np.nonzero(d32 <= cut + 2.0 * _screen_slack(store.dim))[0]
    return _ordered_candidates(store, row, cand)[:kk]


def topk(store: EmbeddingStore, query_id: str, k: int) -> RankedMatches:
    """Exact k nearest rows by cosine distance, self excluded, ties by id."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    row = store.id_index.get(query_id)
    if row is None:
        raise UnknownId(query_id)
    best = _exact_topk(store, row, k)
    entries = tuple((store.ids[idx], float(d)) for d, _, idx in best)
    return RankedMatches(query_id=query_id, entries=entries, k=k)


def _group_rows(
    store: EmbeddingStore, identity_of: Mapping[str, IdentityKey]
) -> dict[IdentityKey, list[int]]:
    groups: dict[IdentityKey, list[int]] = {}
    for i, ann_id in enumerate(store.ids):
        key = identity_of.get(ann_id)
        if key is None:
            raise UnknownId(ann_id)
        groups.setdefault(key, []).append(i)
    return groups


def _cap_rng(cap_seed: int, *parts: object) -> np.random.Generator:
    token = "\x1f".join(repr(p) for p in (cap_seed, *parts)).encode()
    digest = hashlib.sha256(token).digest()
    words = [int.from_bytes(digest[i : i + 8], "little") for i in range(0, 32, 8)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


@dataclass(frozen=True)
class CappedEligibility:
    """Database subsample with at most ``max_per_identity`` rows per
    identity; the query's own identity is re-drawn per query with the
    query row excluded."""

    store: EmbeddingStore
    groups: Mapping[IdentityKey, list[int]]
    row_identity: Mapping[int, IdentityKey]
    base: np.ndarray
    max_per_identity: int
    cap_seed: int

    def mask_for_query(self, row: int) -> np.ndarray:
        mask = self.base.copy()
        key = self.row_identity[row]
        pool = sorted(
            (i for i in self.groups[key] if i != row),
            key=lambda i: self.store.ids[i],
        )
        mask[self.groups[key]] = False
        if len(pool) <= self.max_per_identity:
            keep = pool
        else:
            rng = _cap_rng(
                self.cap_seed, self.store.species, repr(key), self.store.ids[row]
            )
            picked = rng.choice(len(pool), size=self.max_per_identity, replace=False)
            keep = [pool[i] for i in picked]
        mask[keep] = True
        mask[row] = False
        return mask


def capped_eligibility(
    store: EmbeddingStore,
    identity_of: Mapping[str, IdentityKey],
    max_per_identity: int,
    cap_seed: int,
) -> CappedEligibility:
    if max_per_identity < 1:
        raise ValidationError("max_per_identity must be >= 1")
    groups = _group_rows(store, identity_of)
    base = np.zeros(len(store), dtype=bool)
    for key, rows in sorted(groups.items(), key=lambda kv: repr(kv[0])):
        pool = sorted(rows, key=lambda i: store.ids[i])
        if len(pool) <= max_per_identity:
            keep = pool
        else:
            rng = _cap_rng(cap_seed, store.species, repr(key))
            picked = rng.choice(len(pool), size=max_per_identity, replace=False)
            keep = [pool[i] for i in picked]
        base[keep] = True
    return CappedEligibility(
        store=store,
        groups=groups,
        row_identity={i: k for k, rows in groups.items() for i in rows},
        base=base,
        max_per_identity=max_per_identity,
        cap_seed=cap_seed,
    )


def topk_capped(
    store: EmbeddingStore,
    query_id: str,
    k: int,
    max_per_identity: int,
    identity_of: Mapping[str, IdentityKey],
    cap_seed: int = 0,
) -> RankedMatches:
    """topk over a database subsampled to ``max_per_identity`` rows per
    identity (query's identity capped with the query itself excluded)."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    row = store.id_index.get(query_id)
    if row is None:
        raise UnknownId(query_id)
    elig = capped_eligibility(store, identity_of, max_per_identity, cap_seed)
    best = _exact_topk(store, row, k, eligible=elig.mask_for_query(row))
    entries = tuple((store.ids[idx], float(d)) for d, _, idx in best)
    return RankedMatches(query_id=query_id, entries=entries, k=k)


def pairwise_eval_distances(
    store: EmbeddingStore, block_rows: int = 256
) -> Iterator[tuple[int, np.ndarray]]:
    """Stream (start_row, block) of float64 distance rows to all rows.

    Self positions are marked +inf. Distances accumulate in float64 so
    blocked results track a per-pair scalar computation far inside the
    documented 1e-5 tolerance.
    """
    if len(store) == 0:
        raise EmptyStore("store has no rows")
    m64 = store.matrix.astype(np.float64)
    n = len(store)
    for start in range(0, n, block_rows):
        stop = min(start + block_rows, n)
        block = _clip_distance(1.0 - m64[start:stop] @ m64.T)
        for i in range(start, stop):
            block[i - start, i] = np.inf
        yield start, block


def write_embeddings(path: str, vectors: Mapping[str, np.ndarray]) -> None:
    """Write the MREID1 binary embedding file (vectors stored as given)."""
    ids = list(vectors.keys())
    if not ids:
        raise ValidationError("no vectors to write")
    rows = [np.asarray(vectors[i], dtype=np.float32) for i in ids]
    dim = rows[0].size
    for ann_id, r in zip(ids, rows):
        if r.ndim != 1 or r.size != dim:
            raise DimensionMismatch(f"vector for {ann_id!r} breaks uniform dim {dim}")
    matrix = np.stack(rows)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", len(ids), dim))
        fh.write(matrix.astype("<f4").tobytes(order="C"))
        for ann_id in ids:
            raw = ann_id.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ValidationError(f"annotation id too long: {ann_id[:32]!r}...")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)


def read_embeddings(path: str) -> dict[str, np.ndarray]:
    """Read an MREID1 file; returns id -> float32 vector in file order."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:8] != MAGIC:
        raise FormatError(f"{path}: not an MREID1 embedding file")
    count, dim = struct.unpack_from("<II", data, 8)
    if count == 0 or dim == 0:
        raise FormatError(f"{path}: zero row count or dimension")
    offset = 16
    nbytes = count * dim * 4
    if len(data) < offset + nbytes:
        raise FormatError(f"{path}: truncated vector block")
    matrix = np.frombuffer(data, dtype="<f4", count=count * dim, offset=offset)
    matrix = matrix.reshape(count, dim)
    offset += nbytes
    out: dict[str, np.ndarray] = {}
    for row in range(count):
        if len(data) < offset + 2:
            raise FormatError(f"{path}: truncated id table")
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        raw = data[offset : offset + id_len]
        if len(raw) != id_len:
            raise FormatError(f"{path}: truncated id table")
        offset += id_len
        try:
            ann_id = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: id table is not valid UTF-8") from None
        if ann_id in out:
            raise FormatError(f"{path}: duplicate id {ann_id!r}")
        out[ann_id] = matrix[row].copy()
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    return out


def read_embeddings_jsonl(text: str) -> dict[str, np.ndarray]:
    """Read the JSONL sidecar format: {"id": ..., "vector": [...]}."""
    out: dict[str, np.ndarray] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"line {line_no}: invalid JSON: {exc.msg}") from None
        if not isinstance(obj, dict) or "id" not in obj or "vector" not in obj:
            raise FormatError(f"line {line_no}: expected {{id, vector}}")
        ann_id = str(obj["id"])
        if ann_id in out:
            raise FormatError(f"line {line_no}: duplicate id {ann_id!r}")
        out[ann_id] = np.asarray(obj["vector"], dtype=np.float32)
    return out


def write_embeddings_jsonl(vectors: Mapping[str, np.ndarray]) -> str:
    lines = [
        json.dumps({"id": ann_id, "vector": np.asarray(v, dtype=np.float32).tolist()})
        for ann_id, v in vectors.items()
    ]
    return "\n".join(lines) + "\n"
