from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from synthdata import random_vectors
from mreid.catalog import IdentityKey
from mreid.errors import DisjointSpecies, EmptyStore, ValidationError
from mreid.evaluator import (
    CurvePoint,
    EvalConfig,
    EvalReport,
    SpeciesEval,
    build_report,
    compare_reports,
    curve_by_cap,
    one_vs_all,
    report_from_json,
    report_to_json,
)
from mreid.store import build_store


def _identities(vecs, n_idents, species="sp"):
    return {
        k: IdentityKey(species, f"i{j % n_idents}") for j, k in enumerate(vecs)
    }


def test_eval_config_validation():
    with pytest.raises(ValidationError):
        EvalConfig(ranks=())
    with pytest.raises(ValidationError):
        EvalConfig(ranks=(5, 1))
    with pytest.raises(ValidationError):
        EvalConfig(ranks=(0, 1))


def test_hand_enumerated_three_annotation_store():
    # a,b share an identity and are collinear; c is alone and orthogonal
    vecs = {"a": (1.0, 0.0), "b": (2.0, 0.0), "c": (0.0, 1.0)}
    ident = {
        "a": IdentityKey("sp", "x"),
        "b": IdentityKey("sp", "x"),
        "c": IdentityKey("sp", "y"),
    }
    store = build_store(vecs, "sp")

    # skipping on: c is excluded from the denominator
    res = one_vs_all(store, ident, EvalConfig(ranks=(1,)))
    assert res.n_queries == 2 and res.n_skipped == 1
    assert res.accuracy[1] == 1.0
    assert dict(res.details) == {"a": 1, "b": 1, "c": None}

    # skipping off: c scores as a miss, denominator includes all 3
    res = one_vs_all(
        store, ident, EvalConfig(ranks=(1,), skip_queries_without_positives=False)
    )
    assert res.n_queries == 3 and res.n_skipped == 0
    assert res.accuracy[1] == pytest.approx(2 / 3)


def test_two_annotations_one_identity():
    vecs = {"a": (1.0, 0.2), "b": (-0.3, 1.0)}
    ident = {"a": IdentityKey("sp", "x"), "b": IdentityKey("sp", "x")}
    res = one_vs_all(build_store(vecs, "sp"), ident, EvalConfig(ranks=(1,)))
    assert res.accuracy[1] == 1.0  # the only neighbor is the positive


def test_empty_store_rejected():
    vecs = {"a": (1.0, 0.0)}
    st_ = build_store(vecs, "sp")
    object.__setattr__(st_, "ids", ())
    object.__setattr__(st_, "matrix", np.zeros((0, 2), dtype=np.float32))
    with pytest.raises(EmptyStore):
        one_vs_all(st_, {}, EvalConfig())


def test_matches_oracle_forty_annotations():
    vecs = random_vectors(40, 6, seed=11, duplicate_frac=0.2)
    ident = _identities(vecs, 8)
    res = one_vs_all(build_store(vecs, "sp"), ident, EvalConfig(ranks=(1, 5, 10)))
    want_acc, want_nq, want_skip, want_ranks = oracles.eval_one_vs_all(
        vecs, ident, (1, 5, 10)
    )
    assert res.accuracy == want_acc
    assert (res.n_queries, res.n_skipped) == (want_nq, want_skip)
    assert dict(res.details) == want_ranks


def test_rank_monotonicity_and_skip_accounting():
    for seed in range(4):
        vecs = random_vectors(60, 10, seed=seed, duplicate_frac=0.1)
        ident = _identities(vecs, 13)
        res = one_vs_all(build_store(vecs, "sp"), ident, EvalConfig())
        accs = [res.accuracy[k] for k in (1, 5, 10, 20)]
        assert accs == sorted(accs)
        assert res.n_queries + res.n_skipped == 60


def test_permutation_invariance():
    vecs = random_vectors(50, 8, seed=3, duplicate_frac=0.3)
    ident = _identities(vecs, 9)
    res_a = one_vs_all(build_store(vecs, "sp"), ident, EvalConfig())
    shuffled = {k: vecs[k] for k in reversed(list(vecs))}
    res_b = one_vs_all(build_store(shuffled, "sp"), ident, EvalConfig())
    assert res_a.accuracy == res_b.accuracy
    assert dict(res_a.details) == dict(res_b.details)


def test_capped_eval_matches_capped_oracle():
    rng = np.random.default_rng(5)
    vecs = random_vectors(45, 5, seed=5)
    ident = _identities(vecs, 7)
    store = build_store(vecs, "sp")
    from mreid.store import capped_eligibility

    for m in (1, 2, 3):
        res = one_vs_all(store, ident, EvalConfig(ranks=(1, 5)),
                         max_per_identity=m, cap_seed=9)
        elig = capped_eligibility(store, ident, m, 9)
        eligible_for = {
            q: {store.ids[i] for i in np.nonzero(elig.mask_for_query(r))[0]}
            for r, q in enumerate(store.ids)
        }
        want_acc, want_nq, want_skip, _ = oracles.eval_one_vs_all(
            vecs, ident, (1, 5), eligible_for=eligible_for
        )
        assert res.accuracy == want_acc
        assert (res.n_queries, res.n_skipped) == (want_nq, want_skip)


def test_capped_eval_scoring_skips_as_misses():
    vecs = random_vectors(30, 4, seed=6)
    ident = _identities(vecs, 6)
    store = build_store(vecs, "sp")
    from mreid.store import capped_eligibility

    cfg = EvalConfig(ranks=(1,), skip_queries_without_positives=False)
    res = one_vs_all(store, ident, cfg, max_per_identity=1, cap_seed=3)
    elig = capped_eligibility(store, ident, 1, 3)
    eligible_for = {
        q: {store.ids[i] for i in np.nonzero(elig.mask_for_query(r))[0]}
        for r, q in enumerate(store.ids)
    }
    want_acc, want_nq, want_skip, _ = oracles.eval_one_vs_all(
        vecs, ident, (1,), skip_without_positives=False, eligible_for=eligible_for
    )
    assert res.accuracy == want_acc
    assert (res.n_queries, res.n_skipped) == (want_nq, want_skip)
    assert res.n_queries == 30  # everything scored


def test_tiny_store_with_default_ranks():
    vecs = random_vectors(5, 3, seed=4)
    ident = _identities(vecs, 2)
    res = one_vs_all(build_store(vecs, "sp"), ident, EvalConfig())
    assert set(res.accuracy) == {1, 5, 10, 20}
    assert res.accuracy[5] == res.accuracy[20]  # only 4 reference rows exist


def test_curve_large_cap_equals_uncapped():
    vecs = random_vectors(40, 6, seed=7)
    ident = _identities(vecs, 6)
    store = build_store(vecs, "sp")
    uncapped = one_vs_all(store, ident, EvalConfig(ranks=(1,)))
    points = curve_by_cap(store, ident, caps=(1, 2, math.inf), cap_seed=3)
    assert points[-1].mean_top1 == uncapped.accuracy[1]
    assert points[-1].std_top1 == 0.0  # single species


def test_curve_caps_fall_back_to_config():
    vecs = random_vectors(12, 4, seed=9)
    ident = _identities(vecs, 4)
    store = build_store(vecs, "sp")
    cfg = EvalConfig(caps=(1, 2))
    points = curve_by_cap(store, ident, cfg=cfg)
    assert [p.cap for p in points] == [1.0, 2.0]
    with pytest.raises(ValidationError):
        curve_by_cap(store, ident)  # neither argument nor config


def test_curve_cap_one_with_pairs():
    # every identity has exactly 2 annotations: capping at 1 leaves each
    # query exactly one positive in the database
    vecs = random_vectors(20, 4, seed=8)
    ident = _identities(vecs, 10)
    store = build_store(vecs, "sp")
    res = one_vs_all(store, ident, EvalConfig(ranks=(1,)),
                     max_per_identity=1, cap_seed=0)
    assert res.n_queries == 20 and res.n_skipped == 0


def test_curve_multi_species_matches_recomputation():
    stores, ident = {}, {}
    rng = np.random.default_rng(0)
    for s in range(5):
        vecs = random_vectors(24, 5, seed=100 + s)
        vecs = {f"sp{s}-{k}": v for k, v in vecs.items()}
        ident.update(
            {k: IdentityKey(f"sp{s}", f"i{j % 6}") for j, k in enumerate(vecs)}
        )
        stores[f"sp{s}"] = build_store(vecs, f"sp{s}")
    caps = (1, 2, 3, 5, 10)
    points = curve_by_cap(stores, ident, caps, cap_seed=2)
    for m, point in zip(caps, points):
        top1 = [
            one_vs_all(stores[sp], ident, EvalConfig(ranks=(1,)),
                       max_per_identity=m, cap_seed=2).accuracy[1]
            for sp in sorted(stores)
        ]
        arr = np.asarray(top1)
        assert point.mean_top1 == pytest.approx(arr.mean(), abs=1e-12)
        assert point.std_top1 == pytest.approx(arr.std(), abs=1e-12)  # population


def _report_from_accuracies(acc_by_species: dict[str, float], k: int = 1) -> EvalReport:
    evals = [
        SpeciesEval(species=sp, accuracy={k: acc}, n_queries=100, n_skipped=0,
                    details=())
        for sp, acc in acc_by_species.items()
    ]
    return build_report(evals, ranks=(k,))


def test_compare_reports_identity_is_zero():
    rep = _report_from_accuracies({"lion": 0.9, "hyena": 0.7})
    cmp_ = compare_reports(rep, rep)
    assert all(r.delta == 0.0 for r in cmp_.rows[1])
    assert cmp_.macro_delta[1] == 0.0


def test_compare_reports_published_deltas():
    # multi-species vs single-species and vs zero-shot, per-species top-1
    multi = _report_from_accuracies({"amur_tiger": 0.991, "beluga_whale": 0.721})
    single = _report_from_accuracies({"amur_tiger": 0.927, "giraffe": 0.936})
    zero_shot = _report_from_accuracies({"beluga_whale": 0.280})
    vs_single = compare_reports(multi, single)
    (tiger_row,) = vs_single.rows[1]
    assert tiger_row.species == "amur_tiger"
    assert round(100 * tiger_row.delta, 1) == 6.4
    vs_zero = compare_reports(multi, zero_shot)
    (beluga_row,) = vs_zero.rows[1]
    assert round(100 * beluga_row.delta, 1) == 44.1


def test_compare_reports_three_column_layout():
    a = _report_from_accuracies({"lion": 0.9, "hyena": 0.7, "seal": 0.5})
    b = _report_from_accuracies({"lion": 0.8, "hyena": 0.75, "nyala": 0.2})
    cmp_ = compare_reports(a, b)
    rows = cmp_.rows[1]
    assert [r.species for r in rows] == ["hyena", "lion"]  # intersection only
    header = cmp_.to_csv().splitlines()[0]
    assert header == "species,k,a_accuracy,b_accuracy,delta"
    assert cmp_.macro_delta[1] == pytest.approx(((0.9 - 0.8) + (0.7 - 0.75)) / 2)


def test_compare_reports_disjoint():
    a = _report_from_accuracies({"lion": 0.9})
    b = _report_from_accuracies({"hyena": 0.7})
    with pytest.raises(DisjointSpecies):
        compare_reports(a, b)


def test_macro_is_unweighted_mean():
    evals = [
        SpeciesEval("a", {1: 0.2}, n_queries=1000, n_skipped=0, details=()),
        SpeciesEval("b", {1: 0.8}, n_queries=10, n_skipped=0, details=()),
    ]
    rep = build_report(evals, ranks=(1,))
    assert rep.macro[1] == pytest.approx(0.5)


def test_report_json_roundtrip():
    vecs = random_vectors(30, 4, seed=2)
    ident = _identities(vecs, 5)
    res = one_vs_all(build_store(vecs, "sp"), ident, EvalConfig(ranks=(1, 5)))
    rep = build_report([res], ranks=(1, 5),
                       curves=(CurvePoint(1.0, 0.5, 0.1),))
    text = report_to_json(rep, {"tool": "mreid", "seed": 0})
    back = report_from_json(text)
    assert back.species["sp"].accuracy == res.accuracy
    assert back.macro == rep.macro
    assert back.curves == rep.curves
    assert dict(back.species["sp"].details) == dict(res.details)


@settings(max_examples=20, deadline=None)
@given(
    n=st.integers(4, 30),
    dim=st.integers(2, 8),
    n_idents=st.integers(1, 10),
    seed=st.integers(0, 9999),
)
def test_oracle_equivalence_property(n, dim, n_idents, seed):
    vecs = random_vectors(n, dim, seed=seed, duplicate_frac=0.25)
    ident = _identities(vecs, n_idents)
    res = one_vs_all(build_store(vecs, "sp"), ident, EvalConfig(ranks=(1, 5)))
    want_acc, want_nq, want_skip, want_ranks = oracles.eval_one_vs_all(
        vecs, ident, (1, 5)
    )
    assert res.accuracy == want_acc
    assert (res.n_queries, res.n_skipped) == (want_nq, want_skip)
    assert dict(res.details) == want_ranks
