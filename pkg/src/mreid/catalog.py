"""Annotation catalogs: manifest parsing, identity derivation, indexing.

An annotation is one sighting of one individual animal. Whether two
annotations are even eligible to match depends on the species' viewpoint
policy: for patterned species the two sides of the body look nothing
alike, so each viewpoint group becomes its own matching identity; for
outline-based species opposite sides can match and the viewpoint is
ignored.
"""

from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping

from .errors import (
    DuplicateAnnotationId,
    EmptyCatalog,
    MalformedRow,
    UnknownViewpoint,
    ValidationError,
    ViewpointNotInAnyGroup,
)

VIEWPOINTS = ("left", "right", "front", "back", "top", "unknown")

MANIFEST_COLUMNS = (
    "annotation_id",
    "species",
    "individual_id",
    "viewpoint",
    "encounter_id",
    "image_ref",
    "bbox_x",
    "bbox_y",
    "bbox_w",
    "bbox_h",
)

_BBOX_COLUMNS = ("bbox_x", "bbox_y", "bbox_w", "bbox_h")


@dataclass(frozen=True)
class Annotation:
    """One sighting of one individual in one image."""

    annotation_id: str
    species: str
    individual_id: str
    viewpoint: str = "unknown"
    encounter_id: str = ""
    image_ref: str = ""
    bbox: tuple[int, int, int, int] | None = None

    def __post_init__(self):
        if self.viewpoint not in VIEWPOINTS:
            raise UnknownViewpoint(self.viewpoint)
        if self.bbox is not None:
            x, y, w, h = self.bbox
            if min(x, y, w, h) < 0 or w == 0 or h == 0:
                raise ValidationError(
                    f"annotation {self.annotation_id!r}: bbox must have "
                    f"non-negative origin and positive size, got {self.bbox}"
                )


@dataclass(frozen=True)
class SpeciesPolicy:
    """Per-species rule for whether viewpoints split matching identities.

    ``matchable_viewpoint_groups`` lists sets of viewpoints that may match
    each other; a viewpoint may appear in at most one group. The default
    is conservative: every viewpoint is its own group, so sides are never
    merged for a species nobody configured.
    """

    species: str
    viewpoint_splits_identity: bool = True
    matchable_viewpoint_groups: tuple[frozenset[str], ...] = (
        frozenset({"left"}),
        frozenset({"right"}),
        frozenset({"front"}),
        frozenset({"back"}),
        frozenset({"top"}),
    )

    def __post_init__(self):
        seen: set[str] = set()
        for group in self.matchable_viewpoint_groups:
            for vp in group:
                if vp not in VIEWPOINTS:
                    raise UnknownViewpoint(vp)
                if vp in seen:
                    raise ValidationError(
                        f"policy for {self.species!r}: viewpoint {vp!r} "
                        "appears in more than one group"
                    )
                seen.add(vp)

    def group_of(self, viewpoint: str) -> int:
        for i, group in enumerate(self.matchable_viewpoint_groups):
            if viewpoint in group:
                return i
        raise ViewpointNotInAnyGroup(viewpoint, self.species)


@dataclass(frozen=True)
class IdentityKey:
    """The effective matching identity of an annotation.

    ``viewpoint_group`` is set only when the species policy splits
    identities by viewpoint; two annotations are match-eligible iff their
    keys are equal.
    """

    species: str
    individual_id: str
    viewpoint_group: int | None = None


def derive_identity(ann: Annotation, policy: SpeciesPolicy) -> IdentityKey:
    """Map an annotation to its matching identity under a species policy."""
    if ann.species != policy.species:
        raise ValidationError(
            f"annotation species {ann.species!r} != policy species {policy.species!r}"
        )
    if not policy.viewpoint_splits_identity:
        return IdentityKey(ann.species, ann.individual_id, None)
    return IdentityKey(ann.species, ann.individual_id, policy.group_of(ann.viewpoint))


@dataclass(frozen=True)
class Catalog:
    """Immutable collection of annotations plus species policies.

    The identity index is derived lazily: manifest ingestion validates
    row syntax only, so a catalog can be loaded and inspected before the
    operator supplies viewpoint policies for every species.
    """

    annotations: tuple[Annotation, ...]
    policies: Mapping[str, SpeciesPolicy] = field(default_factory=dict)

    def policy_for(self, species: str) -> SpeciesPolicy:
        pol = self.policies.get(species)
        return pol if pol is not None else SpeciesPolicy(species=species)

    def identity_of(self, ann: Annotation) -> IdentityKey:
        return derive_identity(ann, self.policy_for(ann.species))

    @cached_property
    def by_id(self) -> dict[str, Annotation]:
        return {a.annotation_id: a for a in self.annotations}

    @cached_property
    def species(self) -> tuple[str, ...]:
        return tuple(sorted({a.species for a in self.annotations}))

    @cached_property
    def index(self) -> dict[str, dict[IdentityKey, tuple[str, ...]]]:
        """species -> IdentityKey -> annotation ids (catalog order)."""
        out: dict[str, dict[IdentityKey, list[str]]] = {}
        for ann in self.annotations:
            key = self.identity_of(ann)
            out.setdefault(ann.species, {}).setdefault(key, []).append(
                ann.annotation_id
            )
        return {
            sp: {k: tuple(v) for k, v in groups.items()} for sp, groups in out.items()
        }

    def identity_map(self, species: str | None = None) -> dict[str, IdentityKey]:
        """annotation id -> IdentityKey, optionally for one species."""
        anns: Iterable[Annotation] = self.annotations
        if species is not None:
            anns = (a for a in self.annotations if a.species == species)
        return {a.annotation_id: self.identity_of(a) for a in anns}


def _build_annotation(row: Mapping[str, str], line_no: int) -> Annotation:
    for col in ("annotation_id", "species", "individual_id"):
        if not (row.get(col) or "").strip():
            raise MalformedRow(line_no, f"missing required field {col!r}")
    viewpoint = (row.get("viewpoint") or "").strip() or "unknown"
    if viewpoint not in VIEWPOINTS:
        raise UnknownViewpoint(viewpoint)

    bbox_raw = [(row.get(c) or "").strip() for c in _BBOX_COLUMNS]
    bbox: tuple[int, int, int, int] | None = None
    if any(bbox_raw):
        if not all(bbox_raw):
            raise MalformedRow(line_no, "bbox columns must be all present or all absent")
        try:
            x, y, w, h = (int(v) for v in bbox_raw)
        except ValueError:
            raise MalformedRow(line_no, f"non-integer bbox values {bbox_raw}") from None
        if min(x, y, w, h) < 0 or w == 0 or h == 0:
            raise MalformedRow(line_no, f"invalid bbox ({x}, {y}, {w}, {h})")
        bbox = (x, y, w, h)

    return Annotation(
        annotation_id=row["annotation_id"].strip(),
        species=row["species"].strip(),
        individual_id=row["individual_id"].strip(),
        viewpoint=viewpoint,
        encounter_id=(row.get("encounter_id") or "").strip(),
        image_ref=(row.get("image_ref") or "").strip(),
        bbox=bbox,
    )


def parse_manifest(
    content: bytes | str,
    fmt: str = "csv",
    policies: Mapping[str, SpeciesPolicy] | None = None,
) -> Catalog:
    """Parse a CSV or JSONL annotation manifest into a Catalog.

    CSV requires a header row; the viewpoint column may be absent
    (defaults to ``unknown``) and the four bbox columns are optional.
    JSONL uses one object per line with the same field names.
    """
    if isinstance(content, bytes):
        content = content.decode("utf-8")
    # leading comment lines carry provenance on generated manifests
    lines = content.splitlines(keepends=True)
    first_data = 0
    while first_data < len(lines) and lines[first_data].startswith("#"):
        first_data += 1
    content = "".join(lines[first_data:])
    annotations: list[Annotation] = []
    seen: set[str] = set()

    if fmt == "csv":
        reader = csv.DictReader(io.StringIO(content))
        if reader.fieldnames is None:
            raise MalformedRow(1, "empty manifest (no header)")
        unknown = set(reader.fieldnames) - set(MANIFEST_COLUMNS)
        if unknown:
            raise MalformedRow(1 + first_data, f"unknown columns {sorted(unknown)}")
        for line_no, row in enumerate(reader, start=2 + first_data):
            if row.get(None) is not None:
                raise MalformedRow(line_no, "more fields than header columns")
            annotations.append(_build_annotation(row, line_no))
    elif fmt == "jsonl":
        for line_no, line in enumerate(content.splitlines(), start=1 + first_data):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRow(line_no, f"invalid JSON: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise MalformedRow(line_no, "expected a JSON object")
            unknown = set(obj) - set(MANIFEST_COLUMNS)
            if unknown:
                raise MalformedRow(line_no, f"unknown fields {sorted(unknown)}")
            row = {k: str(v) if v is not None else "" for k, v in obj.items()}
            annotations.append(_build_annotation(row, line_no))
    else:
        raise ValidationError(f"unsupported manifest format {fmt!r}")

    for ann in annotations:
        if ann.annotation_id in seen:
            raise DuplicateAnnotationId(ann.annotation_id)
        seen.add(ann.annotation_id)
    return Catalog(annotations=tuple(annotations), policies=dict(policies or {}))


def serialize_manifest(cat: Catalog, fmt: str = "csv") -> str:
    """Inverse of parse_manifest; round-trips the annotation list."""
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for a in cat.annotations:
            bbox = [str(v) for v in a.bbox] if a.bbox is not None else ["", "", "", ""]
            writer.writerow(
                [a.annotation_id, a.species, a.individual_id, a.viewpoint,
                 a.encounter_id, a.image_ref, *bbox]
            )
        return buf.getvalue()
    if fmt == "jsonl":
        lines = []
        for a in cat.annotations:
            obj: dict[str, object] = {
                "annotation_id": a.annotation_id,
                "species": a.species,
                "individual_id": a.individual_id,
                "viewpoint": a.viewpoint,
                "encounter_id": a.encounter_id,
                "image_ref": a.image_ref,
            }
            if a.bbox is not None:
                obj.update(zip(_BBOX_COLUMNS, a.bbox))
            lines.append(json.dumps(obj, sort_keys=True))
        return "\n".join(lines) + "\n"
    raise ValidationError(f"unsupported manifest format {fmt!r}")


def load_policies(text: str) -> dict[str, SpeciesPolicy]:
    """Load the species-policy JSON map.

    Schema: ``{species: {"viewpoint_splits_identity": bool,
    "matchable_viewpoint_groups": [[viewpoint, ...], ...]}}``. Either key
    may be omitted to take the default.
    """
    raw = json.loads(text)
    if not isinstance(raw, dict):
        raise ValidationError("policy file must be a JSON object keyed by species")
    policies: dict[str, SpeciesPolicy] = {}
    for species, spec in raw.items():
        if not isinstance(spec, dict):
            raise ValidationError(f"policy for {species!r} must be an object")
        kwargs: dict[str, object] = {"species": species}
        if "viewpoint_splits_identity" in spec:
            kwargs["viewpoint_splits_identity"] = bool(spec["viewpoint_splits_identity"])
        if "matchable_viewpoint_groups" in spec:
            kwargs["matchable_viewpoint_groups"] = tuple(
                frozenset(g) for g in spec["matchable_viewpoint_groups"]
            )
        policies[species] = SpeciesPolicy(**kwargs)  # type: ignore[arg-type]
    return policies


def catalog_stats(cat: Catalog) -> dict[str, dict[str, float | int]]:
    """Per-species annotation/individual counts over derived identities."""
    if not cat.annotations:
        raise EmptyCatalog("catalog has no annotations")
    stats: dict[str, dict[str, float | int]] = {}
    for species in cat.species:
        groups = cat.index.get(species, {})
        sizes = sorted(len(ids) for ids in groups.values())
        total = sum(sizes)
        stats[species] = {
            "annotation_count": total,
            "individual_count": len(sizes),
            "annotations_per_individual_mean": total / len(sizes),
            "annotations_per_individual_median": statistics.median(sizes),
        }
    return stats
