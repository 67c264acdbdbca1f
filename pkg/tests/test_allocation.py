import math

import numpy as np
import pytest

from splitrag.allocation import (
    Allocation,
    allocate,
    allocate_partition,
    build_matrix,
    coverage_density,
    decomposition_pattern,
    group_coherence,
)
from splitrag.partition import SegmentPool, Subgraph, _make_subgraph
from splitrag.questions import QuestionBase

from conftest import make_kg, make_record


def sg(sid, signature):
    return Subgraph(sid, frozenset(), frozenset(), {}, signature, (sid,))


@pytest.fixture()
def two_subgraph_setup():
    kg = make_kg([("m1", "directed_by", "d1"), ("m1", "has_genre", "g1"), ("m2", "has_genre", "g1")])
    t = {kg.triple_names(x): x for x in kg.triples}
    pool = SegmentPool({})
    d1 = _make_subgraph(0, frozenset([t[("m1", "directed_by", "d1")]]), pool, kg, (0,))
    d2 = _make_subgraph(1, frozenset([t[("m1", "has_genre", "g1")], t[("m2", "has_genre", "g1")]]), pool, kg, (1,))
    return kg, [d1, d2]


def test_matrix_rows(two_subgraph_setup):
    kg, subs = two_subgraph_setup
    split = make_record(kg, "split", "what about m1", ["m1"],
                        [["m1", "directed_by", "d1"], ["m1", "has_genre", "g1"]])
    inside = make_record(kg, "inside", "what about m1", ["m1"], ["m1", "directed_by", "d1"])
    crossing = make_record(kg, "crossing", "what about d1", ["d1"], ["d1", "directed_by", "m1", "has_genre", "g1"])
    bare = make_record(kg, "bare", "what about m1", ["m1"])
    m = build_matrix(QuestionBase([split, inside, crossing, bare]), subs)
    np.testing.assert_allclose(m.values, [[0.5, 0.5], [1.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
    assert m.coverage_sets() == [frozenset({0, 1}), frozenset({0}), frozenset(), frozenset()]
    for row, n in zip(m.values, m.path_counts):
        assert (row * n).sum() <= n + 1e-12


def test_coverage_density_examples():
    c1 = frozenset({1})
    assert coverage_density(c1, [c1]) == 1.0
    four = frozenset({1, 2, 3, 4})
    assert coverage_density(four, [four, four]) == 4.0
    a, b = frozenset({1, 2, 3}), frozenset({4, 5})
    assert coverage_density(a, [a, b]) == pytest.approx(math.sqrt(3))
    assert coverage_density(frozenset(), [a]) == 0.0


def test_coherence_examples():
    assert group_coherence([{"a": 3, "b": 1}]) == pytest.approx(1.0)
    assert group_coherence([{"a": 1}, {"a": 1}]) == pytest.approx(1.0)
    assert group_coherence([{"a": 1}, {"b": 1}]) == pytest.approx(1 / math.sqrt(2))


def test_one_question_over_three_subgraphs_forms_one_group():
    subs = [sg(i, {"movie|directed_by": 1}) for i in range(3)]
    alloc = allocate(subs, [frozenset({0, 1, 2})], n_max=3, theta_coh=0.3)
    assert [g.members for g in alloc.groups] == [(0, 1, 2)]
    assert alloc.groups[0].origin == "loop"


def test_capacity_one_forces_singletons():
    subs = [sg(i, {"movie|directed_by": 1}) for i in range(3)]
    alloc = allocate(subs, [frozenset({0, 1, 2})], n_max=1)
    assert sorted(g.members for g in alloc.groups) == [(0,), (1,), (2,)]


def test_oversized_candidate_is_trimmed_by_frequency_and_requeued():
    subs = [sg(i, {"movie|directed_by": 1}) for i in range(4)]
    # frequencies: 0 -> 1, 1 -> 3, 2 -> 2, 3 -> 1
    coverage = [frozenset({0, 1, 2, 3}), frozenset({1, 2}), frozenset({1})]
    alloc = allocate(subs, coverage, n_max=2)
    groups = [g.members for g in alloc.groups]
    assert groups[0] == (1, 2)
    assert (0, 3) in groups
    assert all(len(g) <= 2 for g in groups)


def test_incoherent_candidate_is_skipped_and_leftovers_flagged():
    subs = [sg(0, {"a": 1}), sg(1, {"b": 1}), sg(2, {"c": 1})]
    alloc = allocate(subs, [frozenset({0, 1, 2})], n_max=3, theta_coh=0.9)
    assert sorted(m for g in alloc.groups for m in g.members) == [0, 1, 2]
    assert all(g.origin == "leftover" or g.absorbed for g in alloc.groups)
    assert any(g.flagged for g in alloc.groups)


def test_coordination_cost_reports_both_counts():
    subs = [sg(i, {"a": 1}) for i in range(3)]
    alloc = allocate(subs, [frozenset({0, 1, 2}), frozenset({0})], n_max=2)
    assert alloc.coordination_cost["by_subgraphs"] == math.ceil(3 / 2) + 1
    assert alloc.coordination_cost["by_agents"] == sum(len(v) for v in alloc.audit.values())


def test_allocation_json_roundtrip(toy_dataset):
    from splitrag.partition import partition_graph

    part = partition_graph(toy_dataset.base, toy_dataset.kg)
    alloc, _ = allocate_partition(toy_dataset.base, part)
    again = Allocation.from_json(alloc.to_json())
    assert again.to_json() == alloc.to_json()
    assert again.owner == alloc.owner


def test_toy_allocation_constraints(toy_dataset):
    from splitrag.partition import partition_graph

    part = partition_graph(toy_dataset.base, toy_dataset.kg)
    alloc, _ = allocate_partition(toy_dataset.base, part)
    owned = sorted(m for g in alloc.groups for m in g.members)
    assert owned == list(range(len(part.subgraphs)))
    for g in alloc.groups:
        assert len(g.members) <= alloc.n_max
        if g.origin == "loop" and not g.absorbed:
            assert g.coherence >= alloc.theta_coh


def test_decomposition_pattern_of_a_three_hop_question(toy_dataset):
    from splitrag.partition import partition_graph

    kg, base = toy_dataset.kg, toy_dataset.base
    part = partition_graph(base, kg)
    alloc, _ = allocate_partition(base, part)
    rec = next(r for r in base.records if r.path is not None and r.path.hops == 3)
    steps = decomposition_pattern(rec, kg, part, alloc)
    assert [s.anchor for s in steps] == ["entity", "chain"]
    assert [s.template.hops for s in steps] == [2, 1]
    for s in steps:
        assert all(alloc.owner[x] == s.agent for x in s.subgraphs)
