from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synthdata import SPECIES_INVENTORY
from mreid.catalog import (
    Annotation,
    Catalog,
    IdentityKey,
    SpeciesPolicy,
    catalog_stats,
    derive_identity,
    load_policies,
    parse_manifest,
    serialize_manifest,
)
from mreid.errors import (
    DuplicateAnnotationId,
    EmptyCatalog,
    MalformedRow,
    UnknownViewpoint,
    ValidationError,
    ViewpointNotInAnyGroup,
)

CSV_HEADER = "annotation_id,species,individual_id,viewpoint,encounter_id,image_ref\n"


def test_parse_three_rows():
    text = CSV_HEADER + (
        "a1,cheetah,C7,left,e1,img1\n"
        "a2,cheetah,C7,right,e2,img2\n"
        "a3,beluga,B1,top,e3,img3\n"
    )
    cat = parse_manifest(text, "csv")
    assert len(cat.annotations) == 3
    assert cat.by_id["a3"].species == "beluga"


def test_duplicate_id_rejected():
    text = CSV_HEADER + "a1,cheetah,C7,left,e1,\na1,cheetah,C8,left,e2,\n"
    with pytest.raises(DuplicateAnnotationId) as exc:
        parse_manifest(text, "csv")
    assert exc.value.annotation_id == "a1"


def test_species_inventory_manifest():
    # one row per dataset name; species count must match an independent
    # count of the distinct names
    rows = [f"a{i:03d},{sp},i0,left,e{i},\n" for i, sp in enumerate(SPECIES_INVENTORY)]
    cat = parse_manifest(CSV_HEADER + "".join(rows), "csv")
    assert len(SPECIES_INVENTORY) == 61
    assert len(cat.species) == len(set(SPECIES_INVENTORY)) == 61


def test_viewpoint_column_absent_defaults_to_unknown():
    text = "annotation_id,species,individual_id\na1,beluga,B1\n"
    cat = parse_manifest(text, "csv")
    assert cat.annotations[0].viewpoint == "unknown"


def test_leading_comment_lines_skipped():
    text = "# provenance line\n" + CSV_HEADER + "a1,lion,L1,left,e1,\n"
    assert len(parse_manifest(text, "csv").annotations) == 1
    jsonl = (
        "# provenance line\n"
        '{"annotation_id": "a1", "species": "lion", "individual_id": "L1"}\n'
    )
    assert len(parse_manifest(jsonl, "jsonl").annotations) == 1


def test_unknown_viewpoint_token():
    text = CSV_HEADER + "a1,cheetah,C7,sideways,e1,\n"
    with pytest.raises(UnknownViewpoint):
        parse_manifest(text, "csv")


def test_malformed_rows():
    with pytest.raises(MalformedRow):
        parse_manifest(CSV_HEADER + ",cheetah,C7,left,e1,\n", "csv")
    bad_bbox = (
        "annotation_id,species,individual_id,bbox_x,bbox_y,bbox_w,bbox_h\n"
        "a1,cheetah,C7,1,2,3,\n"
    )
    with pytest.raises(MalformedRow):
        parse_manifest(bad_bbox, "csv")
    zero_w = (
        "annotation_id,species,individual_id,bbox_x,bbox_y,bbox_w,bbox_h\n"
        "a1,cheetah,C7,1,2,0,5\n"
    )
    with pytest.raises(MalformedRow):
        parse_manifest(zero_w, "csv")


def test_jsonl_parsing():
    text = (
        '{"annotation_id": "a1", "species": "cheetah", "individual_id": "C7", '
        '"viewpoint": "left", "bbox_x": 0, "bbox_y": 0, "bbox_w": 10, "bbox_h": 20}\n'
        '{"annotation_id": "a2", "species": "cheetah", "individual_id": "C7"}\n'
    )
    cat = parse_manifest(text, "jsonl")
    assert cat.by_id["a1"].bbox == (0, 0, 10, 20)
    assert cat.by_id["a2"].viewpoint == "unknown"
    with pytest.raises(MalformedRow):
        parse_manifest("not json\n", "jsonl")


def test_bbox_validation_on_annotation():
    with pytest.raises(ValidationError):
        Annotation("a", "sp", "i", "left", bbox=(0, 0, 0, 5))
    with pytest.raises(ValidationError):
        Annotation("a", "sp", "i", "left", bbox=(-1, 0, 5, 5))


def test_derive_identity_split_species():
    # patterned flanks: sides are different identities
    policy = SpeciesPolicy(species="cheetah")
    ann = Annotation("a1", "cheetah", "C7", "left")
    key = derive_identity(ann, policy)
    assert key == IdentityKey("cheetah", "C7", 0)
    right = derive_identity(Annotation("a2", "cheetah", "C7", "right"), policy)
    assert right != key


def test_derive_identity_non_split_species():
    policy = SpeciesPolicy(species="beluga", viewpoint_splits_identity=False)
    ann = Annotation("a1", "beluga", "B1", "top")
    assert derive_identity(ann, policy) == IdentityKey("beluga", "B1", None)


def test_derive_identity_unassigned_viewpoint():
    policy = SpeciesPolicy(species="cheetah")
    ann = Annotation("a1", "cheetah", "C7", "unknown")
    with pytest.raises(ViewpointNotInAnyGroup):
        derive_identity(ann, policy)


def test_derive_identity_species_mismatch():
    policy = SpeciesPolicy(species="cheetah")
    with pytest.raises(ValidationError):
        derive_identity(Annotation("a1", "lion", "L1", "left"), policy)


def test_grouped_viewpoints_merge():
    # outline-matchable species: both sides in one group
    policy = SpeciesPolicy(
        species="orca",
        matchable_viewpoint_groups=(frozenset({"left", "right"}),),
    )
    left = derive_identity(Annotation("a1", "orca", "O1", "left"), policy)
    right = derive_identity(Annotation("a2", "orca", "O1", "right"), policy)
    assert left == right


def test_policy_rejects_viewpoint_in_two_groups():
    with pytest.raises(ValidationError):
        SpeciesPolicy(
            species="x",
            matchable_viewpoint_groups=(frozenset({"left"}), frozenset({"left"})),
        )


def test_load_policies():
    policies = load_policies(
        '{"beluga": {"viewpoint_splits_identity": false}, '
        '"orca": {"matchable_viewpoint_groups": [["left", "right"]]}}'
    )
    assert policies["beluga"].viewpoint_splits_identity is False
    assert policies["orca"].group_of("right") == 0


def test_catalog_stats_single_individual():
    cat = parse_manifest(
        CSV_HEADER + "".join(f"a{i},beluga,B1,top,e{i},\n" for i in range(4)),
        "csv",
        {"beluga": SpeciesPolicy("beluga", viewpoint_splits_identity=False)},
    )
    stats = catalog_stats(cat)["beluga"]
    assert stats["annotations_per_individual_mean"] == 4.0
    assert stats["annotations_per_individual_median"] == 4


def test_catalog_stats_hand_computed():
    rows = []
    for ident, count in (("i1", 2), ("i2", 3), ("i3", 10)):
        rows += [f"{ident}-{j},lion,{ident},left,e{ident}{j},\n" for j in range(count)]
    cat = parse_manifest(CSV_HEADER + "".join(rows), "csv")
    stats = catalog_stats(cat)["lion"]
    assert stats["annotations_per_individual_mean"] == 5.0
    assert stats["annotations_per_individual_median"] == 3


def test_catalog_stats_amur_tiger_scale():
    # 1,015 annotations over 103 individuals
    counts = [10] * 88 + [9] * 15
    assert sum(counts) == 1015 and len(counts) == 103
    rows = []
    for i, count in enumerate(counts):
        rows += [
            f"t{i:03d}-{j:03d},amur_tiger,i{i:03d},left,e{i}-{j},\n"
            for j in range(count)
        ]
    cat = parse_manifest(CSV_HEADER + "".join(rows), "csv")
    stats = catalog_stats(cat)["amur_tiger"]
    assert stats["annotation_count"] == 1015
    assert stats["individual_count"] == 103
    assert stats["annotations_per_individual_mean"] == pytest.approx(9.85, abs=0.005)


def test_catalog_stats_empty():
    with pytest.raises(EmptyCatalog):
        catalog_stats(Catalog(annotations=()))


def test_index_partitions_annotations():
    text = CSV_HEADER + (
        "a1,cheetah,C7,left,e1,\n"
        "a2,cheetah,C7,left,e2,\n"
        "a3,cheetah,C7,right,e3,\n"
        "a4,cheetah,C8,left,e4,\n"
    )
    cat = parse_manifest(text, "csv")
    groups = cat.index["cheetah"]
    assert sum(len(v) for v in groups.values()) == 4
    assert groups[IdentityKey("cheetah", "C7", 0)] == ("a1", "a2")


_ids = st.lists(
    st.text(alphabet="abcdefgh0123456789", min_size=1, max_size=8),
    min_size=1, max_size=20, unique=True,
)


@settings(max_examples=50, deadline=None)
@given(
    ids=_ids,
    species=st.sampled_from(["lion", "hyena"]),
    viewpoints=st.lists(
        st.sampled_from(["left", "right", "front", "back", "top"]),
        min_size=20, max_size=20,
    ),
    individuals=st.lists(st.integers(0, 4), min_size=20, max_size=20),
)
def test_roundtrip_and_partition(ids, species, viewpoints, individuals):
    anns = tuple(
        Annotation(ann_id, species, f"i{individuals[i]}", viewpoints[i],
                   encounter_id=f"e{i}")
        for i, ann_id in enumerate(ids)
    )
    cat = Catalog(annotations=anns, policies={species: SpeciesPolicy(species)})
    for fmt in ("csv", "jsonl"):
        back = parse_manifest(serialize_manifest(cat, fmt), fmt, cat.policies)
        assert back.annotations == cat.annotations
    # identity derivation is pure and the index partitions the annotations
    for ann in anns:
        assert cat.identity_of(ann) == cat.identity_of(ann)
    assert sum(len(v) for v in cat.index[species].values()) == len(anns)
    seen = [a for group in cat.index[species].values() for a in group]
    assert sorted(seen) == sorted(a.annotation_id for a in anns)
