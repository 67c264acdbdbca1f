import pytest

from splitrag.fusion import (
    ConflictGraph,
    FusionError,
    aggregate,
    conflict_rule,
    detect_conflicts,
    fuse,
    resolve,
    synthesize,
)
from splitrag.kg import Pattern
from splitrag.retrieval import RetrievalResult
from splitrag.routing import AnswerSpec, RetrievalPlan, Subquestion

from conftest import make_kg

SQ = Subquestion("t", 0, Pattern(("movie", "year"), (("release_year", False),)), (), "pattern")


@pytest.fixture()
def kg():
    return make_kg(
        [("m1", "release_year", "y1"), ("m1", "release_year", "y2"), ("m1", "has_genre", "g1"),
         ("p1", "likes", "m1"), ("p1", "dislikes", "m1")],
        types={"m1": "movie", "y1": "year", "y2": "year", "g1": "genre", "p1": "person"},
        functional_relations=["release_year"], negation_pairs=[["likes", "dislikes"]],
    )


def T(kg, h, r, t):
    return next(x for x in kg.triples if kg.triple_names(x) == (h, r, t))


def result(index, agent, triples, evidence=""):
    return RetrievalResult(index, agent, SQ, (0,), triples=frozenset(triples), evidence=evidence)


def test_aggregate_scores_by_distinct_agents(kg):
    a = T(kg, "m1", "has_genre", "g1")
    agg = aggregate([result(0, 1, [a]), result(1, 1, [a])], {1: 0.8})
    assert agg.scores[a] == pytest.approx(0.8)
    agg = aggregate([result(0, 1, [a], "x"), result(1, 2, [a], "y")], {1: 0.8, 2: 0.6})
    assert agg.scores[a] == pytest.approx(1.4)
    assert agg.provenance[a] == (1, 2) and agg.evidence == "x\ny"
    assert aggregate([result(0, 1, [])], {1: 1.0}).empty
    with pytest.raises(FusionError):
        aggregate([], {})


def test_conflict_rules(kg):
    y1, y2 = T(kg, "m1", "release_year", "y1"), T(kg, "m1", "release_year", "y2")
    assert conflict_rule(y1, y2, kg) == "functional"
    assert conflict_rule(y1, y1, kg) is None
    assert conflict_rule(T(kg, "p1", "likes", "m1"), T(kg, "p1", "dislikes", "m1"), kg) == "negation"
    assert conflict_rule(y1, T(kg, "m1", "has_genre", "g1"), kg) is None


def test_functional_conflict_keeps_the_higher_score(kg):
    y1, y2 = T(kg, "m1", "release_year", "y1"), T(kg, "m1", "release_year", "y2")
    cg = detect_conflicts({y1: 0.9, y2: 0.4}, kg)
    assert list(cg.edges.values()) == ["functional"]
    res = resolve(cg)
    assert res.kept == [y1] and res.removed == [y2] and not res.approximate


def test_triangle_keeps_the_heavy_vertex():
    cg = ConflictGraph(["a", "b", "c"], [0.5, 0.5, 0.9], {(0, 1): "f", (0, 2): "f", (1, 2): "f"})
    assert resolve(cg).kept == ["c"]


def test_path_prefers_two_light_ends_over_heavy_middle():
    cg = ConflictGraph(["a", "b", "c"], [0.6, 1.0, 0.6], {(0, 1): "f", (1, 2): "f"})
    assert resolve(cg).kept == ["a", "c"]


def test_edgeless_graph_keeps_everything():
    cg = ConflictGraph(["a", "b"], [0.3, 0.2])
    res = resolve(cg)
    assert res.kept == ["a", "b"] and res.removed == []


def test_large_component_is_greedy_and_flagged():
    n = 25
    cg = ConflictGraph(list(range(n)), [1.0 + i / 100 for i in range(n)], {(i, i + 1): "f" for i in range(n - 1)})
    res = resolve(cg, exact_limit=20)
    assert res.approximate
    kept = set(res.kept)
    assert not any(i in kept and i + 1 in kept for i in range(n - 1))


def test_non_positive_scores_are_rejected():
    with pytest.raises(FusionError):
        resolve(ConflictGraph(["a"], [0.0]))


def _plan(kg, spec=("release_year", False, "year"), topic=("m1",)):
    return RetrievalPlan("q", "similar", [], {1: 1.0}, (AnswerSpec(*spec),),
                         tuple(kg.entity_id(t) for t in topic))


def test_synthesize_offline(kg):
    y1 = T(kg, "m1", "release_year", "y1")
    assert synthesize({}, "", "q", _plan(kg), kg) == ([], "unknown", ("no-evidence",))
    assert synthesize({y1: 1.0}, "", "q", _plan(kg), kg) == (["y1"], "y1", ())
    answers, text, flags = synthesize({y1: 1.0}, "", "q", _plan(kg, ("has_genre", False, "genre")), kg)
    assert answers == [] and text == "unknown" and flags == ("no-answer",)


def test_answers_ranked_by_score_then_name(kg):
    y1, y2 = T(kg, "m1", "release_year", "y1"), T(kg, "m1", "release_year", "y2")
    assert synthesize({y1: 0.5, y2: 0.9}, "", "q", _plan(kg), kg)[0] == ["y2", "y1"]
    assert synthesize({y1: 0.5, y2: 0.5}, "", "q", _plan(kg), kg)[0] == ["y1", "y2"]


def test_fuse_removes_the_weaker_conflicting_fact(kg):
    y1, y2 = T(kg, "m1", "release_year", "y1"), T(kg, "m1", "release_year", "y2")
    plan = RetrievalPlan("q", "similar", [], {1: 0.9, 2: 0.4}, (AnswerSpec("release_year", False, "year"),),
                         (kg.entity_id("m1"),))
    results = [result(0, 1, [y1]), result(1, 2, [y2])]
    on = fuse(results, plan, "when", kg)
    assert on.answers == ["y1"] and on.removed == [y2]
    assert on.to_json(kg)["conflicts"][0]["rule"] == "functional"
    off = fuse(results, plan, "when", kg, detect=False)
    assert off.answers == ["y1", "y2"] and "conflict-detection-off" in off.flags
    empty = fuse([], plan, "when", kg)
    assert empty.text == "unknown" and "no-retrieval" in empty.flags
