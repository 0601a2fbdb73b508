"""Deterministic train/test assignment with open-set composition control.

Per species: each identity is drawn into the training pool with a
size-dependent probability, training identities reserve a fraction of
their annotations for test ("known" identities), non-training identities
send everything to test ("unseen"). Post-split filters then enforce
minimum train size, one-test-annotation-per-encounter, minimum and
maximum test sizes. A rebalancing pass moves whole identities between
the pools until the known fraction of test identities lands within +/-10
points of the target, when feasible.

All random choices are keyed substreams of (seed, species, identity) or
(seed, species, encounter), so the split of one identity never depends
on catalog order or on other species, and rebalancing never reshuffles
the annotations of identities it does not move.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .catalog import Catalog, IdentityKey
from .errors import SpeciesTooSmall, ValidationError

TRAIN, TEST, DROPPED = "train", "test", "dropped"

# drop_reason values, in filter order
REASON_TRAIN_MIN = "train_min"
REASON_ENCOUNTER_DUP = "encounter_dup"
REASON_TEST_MIN = "test_min"
REASON_TEST_CAP = "test_cap"

_DEFAULT_CURVE = ((500.0, 0.3), (5001.0, 0.5), (math.inf, 0.7))

_REBALANCE_TOLERANCE = 0.10


@dataclass(frozen=True)
class SplitConfig:
    """Knobs for assign_split; defaults follow the documented protocol."""

    seed: int = 0
    target_known_fraction: float = 0.5
    # (upper_bound_exclusive, probability) pairs, ascending; the training
    # probability for a species is the first entry whose bound exceeds the
    # species' annotation count. Smaller datasets get smaller fractions.
    train_fraction_curve: tuple[tuple[float, float], ...] = _DEFAULT_CURVE
    reserve_fraction: float = 0.3
    min_train_annots: int = 3
    min_test_annots: int = 2
    max_test_annots: int = 10
    one_per_encounter: bool = True

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must fit in 64 unsigned bits")
        if not 0.0 < self.reserve_fraction < 1.0:
            raise ValidationError("reserve_fraction must be in (0, 1)")
        if self.min_test_annots < 2:
            raise ValidationError("min_test_annots must be >= 2")
        if self.max_test_annots < self.min_test_annots:
            raise ValidationError("max_test_annots must be >= min_test_annots")
        if self.min_train_annots < 1:
            raise ValidationError("min_train_annots must be >= 1")
        if not 0.0 <= self.target_known_fraction <= 1.0:
            raise ValidationError("target_known_fraction must be in [0, 1]")
        if not self.train_fraction_curve:
            raise ValidationError("train_fraction_curve must be non-empty")
        bounds = [b for b, _ in self.train_fraction_curve]
        if bounds != sorted(bounds) or not math.isinf(bounds[-1]):
            raise ValidationError(
                "train_fraction_curve bounds must ascend and end at infinity"
            )
        for _, p in self.train_fraction_curve:
            if not 0.0 <= p <= 1.0:
                raise ValidationError("train fractions must be probabilities")

    def train_fraction(self, annotation_count: int) -> float:
        for bound, p in self.train_fraction_curve:
            if annotation_count < bound:
                return p
        return self.train_fraction_curve[-1][1]

    def to_json(self) -> str:
        obj = {
            "seed": self.seed,
            "target_known_fraction": self.target_known_fraction,
            "train_fraction_curve": [
                [None if math.isinf(b) else b, p] for b, p in self.train_fraction_curve
            ],
            "reserve_fraction": self.reserve_fraction,
            "min_train_annots": self.min_train_annots,
            "min_test_annots": self.min_test_annots,
            "max_test_annots": self.max_test_annots,
            "one_per_encounter": self.one_per_encounter,
        }
        return json.dumps(obj, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SplitConfig":
        obj = json.loads(text)
        if "train_fraction_curve" in obj:
            obj["train_fraction_curve"] = tuple(
                (math.inf if b is None else float(b), float(p))
                for b, p in obj["train_fraction_curve"]
            )
        return cls(**obj)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


@dataclass(frozen=True)
class SplitRow:
    annotation_id: str
    species: str
    identity: IdentityKey
    label: str
    drop_reason: str = ""


@dataclass(frozen=True)
class SplitAssignment:
    """Per-annotation labels plus per-identity dispositions, with provenance."""

    rows: tuple[SplitRow, ...]
    disposition: Mapping[IdentityKey, str]  # train_only | known | test_only | ""
    seed: int
    config_digest: str
    too_small: tuple[str, ...] = ()
    rebalance_moves: Mapping[str, int] = field(default_factory=dict)

    @property
    def labels(self) -> dict[str, str]:
        return {r.annotation_id: r.label for r in self.rows}

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# mreid split seed={self.seed} config={self.config_digest}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["annotation_id", "label", "drop_reason", "identity_disposition"])
        for r in self.rows:
            writer.writerow(
                [r.annotation_id, r.label, r.drop_reason,
                 self.disposition.get(r.identity, "")]
            )
        return buf.getvalue()


def read_assignment_csv(text: str) -> dict[str, str]:
    """annotation_id -> label from a serialized assignment (comments skipped)."""
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    reader = csv.DictReader(io.StringIO("\n".join(lines)))
    out: dict[str, str] = {}
    for row in reader:
        out[row["annotation_id"]] = row["label"]
    return out


def _substream(*parts: object) -> np.random.Generator:
    """Keyed PCG64 stream; stable under catalog growth elsewhere."""
    token = "\x1f".join(repr(p) for p in parts).encode()
    digest = hashlib.sha256(token).digest()
    words = [int.from_bytes(digest[i : i + 8], "little") for i in range(0, 32, 8)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def _identity_token(key: IdentityKey) -> str:
    return f"{key.individual_id}\x1e{key.viewpoint_group}"


@dataclass
class _SpeciesSplit:
    labels: dict[str, str]
    reasons: dict[str, str]
    train_count: dict[IdentityKey, int]
    test_count: dict[IdentityKey, int]

    def disposition_of(self, ident: IdentityKey) -> str:
        has_train = self.train_count.get(ident, 0) > 0
        has_test = self.test_count.get(ident, 0) > 0
        if has_train and has_test:
            return "known"
        if has_train:
            return "train_only"
        if has_test:
            return "test_only"
        return ""

    def known_fraction(self) -> float | None:
        known = unseen = 0
        idents = set(self.train_count) | set(self.test_count)
        for ident in idents:
            disp = self.disposition_of(ident)
            if disp == "known":
                known += 1
            elif disp == "test_only":
                unseen += 1
        total = known + unseen
        return known / total if total else None


def _materialize(
    seed: int,
    species: str,
    groups: Mapping[IdentityKey, tuple[str, ...]],
    encounters: Mapping[str, str],
    membership: frozenset[IdentityKey],
    cfg: SplitConfig,
) -> _SpeciesSplit:
    """Steps 2-3 plus filters (a)-(d) for one species, given pool membership."""
    labels: dict[str, str] = {}
    reasons: dict[str, str] = {}
    train_ids: dict[IdentityKey, list[str]] = {}
    test_ids: dict[IdentityKey, list[str]] = {}

    for ident in sorted(groups, key=_identity_token):
        annots = list(groups[ident])
        if ident in membership:
            k = len(annots)
            n_reserve = math.ceil(cfg.reserve_fraction * k)
            rng = _substream(seed, species, _identity_token(ident), "reserve")
            pool = sorted(annots)
            picked = rng.choice(len(pool), size=min(n_reserve, k), replace=False)
            reserved = {pool[i] for i in picked}
            train_ids[ident] = [a for a in annots if a not in reserved]
            test_ids[ident] = [a for a in annots if a in reserved]
        else:
            train_ids[ident] = []
            test_ids[ident] = list(annots)

    # (a) training identities below the train minimum lose their train side
    for ident, annots in train_ids.items():
        if annots and len(annots) < cfg.min_train_annots:
            for a in annots:
                labels[a] = DROPPED
                reasons[a] = REASON_TRAIN_MIN
            train_ids[ident] = []

    # (b) at most one test annotation per encounter, species-wide
    if cfg.one_per_encounter:
        by_encounter: dict[str, list[str]] = {}
        for annots in test_ids.values():
            for a in annots:
                enc = encounters.get(a, "")
                if enc:
                    by_encounter.setdefault(enc, []).append(a)
        dropped_enc: set[str] = set()
        for enc, members in by_encounter.items():
            if len(members) < 2:
                continue
            pool = sorted(members)
            rng = _substream(seed, species, "enc", enc)
            keep = pool[int(rng.integers(len(pool)))]
            for a in pool:
                if a != keep:
                    labels[a] = DROPPED
                    reasons[a] = REASON_ENCOUNTER_DUP
                    dropped_enc.add(a)
        if dropped_enc:
            for ident, annots in test_ids.items():
                test_ids[ident] = [a for a in annots if a not in dropped_enc]

    # (c) test identities below the test minimum lose their test side
    for ident, annots in test_ids.items():
        if annots and len(annots) < cfg.min_test_annots:
            for a in annots:
                labels[a] = DROPPED
                reasons[a] = REASON_TEST_MIN
            test_ids[ident] = []

    # (d) cap test annotations per identity by uniform subsampling
    for ident, annots in test_ids.items():
        if len(annots) > cfg.max_test_annots:
            pool = sorted(annots)
            rng = _substream(seed, species, _identity_token(ident), "cap")
            picked = rng.choice(len(pool), size=cfg.max_test_annots, replace=False)
            kept = {pool[i] for i in picked}
            for a in pool:
                if a not in kept:
                    labels[a] = DROPPED
                    reasons[a] = REASON_TEST_CAP
            test_ids[ident] = [a for a in annots if a in kept]

    for ident in groups:
        for a in train_ids[ident]:
            labels[a] = TRAIN
        for a in test_ids[ident]:
            labels[a] = TEST

    return _SpeciesSplit(
        labels=labels,
        reasons=reasons,
        train_count={i: len(v) for i, v in train_ids.items()},
        test_count={i: len(v) for i, v in test_ids.items()},
    )


def _rebalance(
    seed: int,
    species: str,
    groups: Mapping[IdentityKey, tuple[str, ...]],
    encounters: Mapping[str, str],
    membership: frozenset[IdentityKey],
    cfg: SplitConfig,
) -> tuple[frozenset[IdentityKey], _SpeciesSplit, int]:
    """Move whole identities between pools until the known fraction of
    test identities is within tolerance of the target; strict-improvement
    moves only, so the loop terminates."""
    result = _materialize(seed, species, groups, encounters, membership, cfg)
    rng = _substream(seed, species, "rebalance")
    target = cfg.target_known_fraction
    moves = 0
    for _ in range(2 * len(groups)):
        kf = result.known_fraction()
        if kf is None or abs(kf - target) <= _REBALANCE_TOLERANCE:
            break
        if kf < target:
            candidates = [
                i
                for i in groups
                if i not in membership
                and result.disposition_of(i) == "test_only"
                and len(groups[i]) - math.ceil(cfg.reserve_fraction * len(groups[i]))
                >= cfg.min_train_annots
            ]
        else:
            candidates = [
                i
                for i in groups
                if i in membership and result.disposition_of(i) == "known"
            ]
        candidates.sort(key=_identity_token)
        if not candidates:
            break
        order = rng.permutation(len(candidates))
        improved = False
        for j in order:
            ident = candidates[int(j)]
            trial_membership = frozenset(membership ^ {ident})
            trial = _materialize(seed, species, groups, encounters, trial_membership, cfg)
            tkf = trial.known_fraction()
            if tkf is not None and abs(tkf - target) < abs(kf - target) - 1e-12:
                membership, result = trial_membership, trial
                moves += 1
                improved = True
                break
        if not improved:
            break
    return membership, result, moves


def assign_split(
    cat: Catalog, cfg: SplitConfig, allow_too_small: bool = False
) -> SplitAssignment:
    """Produce the train/test/dropped assignment for a whole catalog.

    Species are split independently; identical (catalog, config) inputs
    yield identical assignments. Raises SpeciesTooSmall when a species
    ends with no test identity at all, unless ``allow_too_small`` (the
    species is then flagged and kept with whatever labels it got).
    """
    if not cat.annotations:
        raise ValidationError("catalog has no annotations")

    labels: dict[str, str] = {}
    reasons: dict[str, str] = {}
    disposition: dict[IdentityKey, str] = {}
    too_small: list[str] = []
    rebalance_moves: dict[str, int] = {}

    for species in cat.species:
        groups = cat.index[species]
        total = sum(len(v) for v in groups.values())
        p_train = cfg.train_fraction(total)
        encounters = {
            a.annotation_id: a.encounter_id
            for a in cat.annotations
            if a.species == species
        }
        membership = frozenset(
            ident
            for ident in groups
            if _substream(cfg.seed, species, _identity_token(ident), "draw").random()
            < p_train
        )
        membership, result, moves = _rebalance(
            cfg.seed, species, groups, encounters, membership, cfg
        )
        rebalance_moves[species] = moves
        labels.update(result.labels)
        reasons.update(result.reasons)
        for ident in groups:
            disposition[ident] = result.disposition_of(ident)
        if not any(result.test_count.get(i, 0) > 0 for i in groups):
            if not allow_too_small:
                raise SpeciesTooSmall(species)
            too_small.append(species)

    rows = tuple(
        SplitRow(
            annotation_id=a.annotation_id,
            species=a.species,
            identity=cat.identity_of(a),
            label=labels[a.annotation_id],
            drop_reason=reasons.get(a.annotation_id, ""),
        )
        for a in cat.annotations
    )
    return SplitAssignment(
        rows=rows,
        disposition=disposition,
        seed=cfg.seed,
        config_digest=cfg.digest(),
        too_small=tuple(too_small),
        rebalance_moves=rebalance_moves,
    )


def split_report(sa: SplitAssignment) -> dict[str, dict[str, object]]:
    """Per-species counts, recounted from the assignment rows."""
    per_species: dict[str, dict[str, object]] = {}
    idents_by_species: dict[str, set[IdentityKey]] = {}
    for row in sa.rows:
        rec = per_species.setdefault(
            row.species,
            {"train_annots": 0, "test_annots": 0, "dropped_annots": 0, "drops": {}},
        )
        if row.label == TRAIN:
            rec["train_annots"] += 1
        elif row.label == TEST:
            rec["test_annots"] += 1
        else:
            rec["dropped_annots"] += 1
            drops: dict[str, int] = rec["drops"]  # type: ignore[assignment]
            drops[row.drop_reason] = drops.get(row.drop_reason, 0) + 1
        idents_by_species.setdefault(row.species, set()).add(row.identity)

    for species, idents in idents_by_species.items():
        known = sum(1 for i in idents if sa.disposition.get(i) == "known")
        unseen = sum(1 for i in idents if sa.disposition.get(i) == "test_only")
        rec = per_species[species]
        rec["known_identities"] = known
        rec["unseen_identities"] = unseen
        rec["known_fraction"] = known / (known + unseen) if known + unseen else None
        rec["rebalance_moves"] = sa.rebalance_moves.get(species, 0)
        rec["too_small"] = species in sa.too_small
    return per_species
