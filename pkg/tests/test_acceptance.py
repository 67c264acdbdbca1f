"""Acceptance suite. Each criterion prints one PASS/FAIL line with its measured values."""
import itertools
import json
import math
import random
import shutil
import time
from collections import Counter

import pytest

from splitrag.allocation import allocate_partition
from splitrag.datasets import load_dataset
from splitrag.fusion import ConflictGraph, resolve
from splitrag.kg import split_into_segments
from splitrag.metrics import evaluate_question, f1, hit, hit_at_1, measure_search_space
from splitrag.partition import (
    Partition,
    PartitionConfig,
    SegmentPool,
    _make_subgraph,
    assign_colors,
    information_gain,
    is_connected,
    partition_graph,
    seed_candidates,
)
from splitrag.pipeline import answer_question, build_system, evaluate, run_all
from splitrag.questions import QuestionBase, default_stopwords, record_from_json

from conftest import TOY_DIR
from synth import four_domain_instance, random_instance

SEEDS = range(20)


def verdict(criterion: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def random_partitions():
    t0 = time.perf_counter()
    out = []
    for seed in SEEDS:
        kg, base = random_instance(seed)
        out.append((kg, base, partition_graph(base, kg)))
    return out, time.perf_counter() - t0


# 1 -------------------------------------------------------------------------


def test_c1_partition_validity(random_partitions):
    parts, elapsed = random_partitions
    problems, greedy_steps, absorb_gains = [], 0, []
    for seed, (kg, base, part) in zip(SEEDS, parts):
        eta = part.config.eta_max
        for sg in part.subgraphs:
            if sg.size > eta:
                problems.append(f"seed {seed}: subgraph {sg.id} has {sg.size} > {eta} entities")
            if not is_connected(sg):
                problems.append(f"seed {seed}: subgraph {sg.id} is disconnected")
        for step in part.log:
            if abs(step.ig_after - step.ig_before - step.gain) > 1e-9:
                problems.append(f"seed {seed}: logged gain disagrees with IG totals")
            if step.kind == "greedy":
                greedy_steps += 1
                if not step.gain > part.config.theta_merge:
                    problems.append(f"seed {seed}: greedy merge with gain {step.gain}")
            else:
                absorb_gains.append(step.gain)
    ok = not problems and elapsed < 10.0
    verdict("C1 partition validity", ok,
            f"20 KGs, {greedy_steps} accepted merges all > theta_merge, {len(absorb_gains)} mandatory absorptions "
            f"of undersized subgraphs (min gain {min(absorb_gains, default=0.0):.3f}), "
            f"{elapsed:.2f}s" + (f"; {problems[:3]}" if problems else ""))


# 2 -------------------------------------------------------------------------


def entropy_oracle(candidate_triples, records, n_entities, lam, sign):
    """IG from scratch: count every training segment contained in each candidate."""
    segs = Counter()
    for rec in records:
        for p in rec.paths:
            for s in split_into_segments(p):
                segs[frozenset(s.triples())] += 1
    total = 0.0
    for trs in candidate_triples:
        n_v = len({e for t in trs for e in (t.head, t.tail)})
        counts = [c for s, c in segs.items() if s <= trs]
        n = sum(counts)
        h = -sum(c / n * math.log(c / n) for c in counts) if n else 0.0
        total += sign * h - lam * (n_v / n_entities) * math.log(n_entities / n_v)
    return total


def test_c2_information_gain_oracle():
    fixtures = [(3, 0.5, 1), (5, 1.0, 1), (8, 0.0, 1), (13, 2.0, -1), (21, 0.25, 1)]
    worst = 0.0
    for seed, lam, sign in fixtures:
        kg, base = random_instance(seed, max_entities=60)
        cands = seed_candidates(base, kg)[:6]
        cfg = PartitionConfig(lam=lam, entropy_sign=sign)
        got = information_gain(cands, cfg, kg.n_entities).total
        want = entropy_oracle([c.triples for c in cands], base.records, kg.n_entities, lam, sign)
        worst = max(worst, abs(got - want))
    verdict("C2 IG oracle", worst <= 1e-9, f"5 fixtures of <= 6 candidates, max |diff| = {worst:.2e}")


# 3 -------------------------------------------------------------------------


def test_c3_allocation_constraints(random_partitions):
    parts, _ = random_partitions
    problems, flagged = [], 0
    for seed, (kg, base, part) in zip(SEEDS, parts):
        alloc, _ = allocate_partition(base, part)
        owned = sorted(m for g in alloc.groups for m in g.members)
        if owned != list(range(len(part.subgraphs))):
            problems.append(f"seed {seed}: groups do not cover subgraphs exactly once")
        for g in alloc.groups:
            if len(g.members) > alloc.n_max:
                problems.append(f"seed {seed}: group {g.id} over capacity")
            if g.coherence < alloc.theta_coh:
                late = g.origin == "leftover" or g.absorbed
                if not (late and g.flagged):
                    problems.append(f"seed {seed}: unflagged incoherent group {g.id}")
            flagged += g.flagged
    verdict("C3 allocation constraints", not problems,
            f"20 KGs covered, capacity respected, {flagged} flagged late groups" +
            (f"; {problems[:3]}" if problems else ""))


# 4 -------------------------------------------------------------------------


def _variant(rec, kg, qid, text_only_entity: bool):
    name = kg.entity_name(rec.entities[0])
    text = name if text_only_entity else rec.text
    start = text.index(name)
    obj = {"id": qid, "question": text, "entities": [{"span": [start, start + len(name)], "name": name}],
           "answers": sorted(rec.answers)}
    return record_from_json(obj, kg, default_stopwords())


def test_c4_routing_determinism_and_case_split(toy_system, toy_dataset):
    kg = toy_system.kg
    twins = [_variant(r, kg, f"twin-{r.id}", False) for r in toy_system.base.records]
    ablated = [_variant(r, kg, f"bare-{r.id}", True) for r in list(toy_system.base.records) + toy_dataset.test]
    questions = twins + list(toy_dataset.test) + ablated
    assert len(questions) == 100
    runs = [[toy_system.router.route(q).to_json(kg) for q in questions] for _ in range(3)]
    same = runs[0] == runs[1] == runs[2]
    twin_similar = sum(p["mode"] == "similar" for p in runs[0][:30])
    bare_path = sum(p["mode"] == "path-driven" for p in runs[0][50:])
    offenders = []
    for q, plan in zip(questions[50:], runs[0][50:]):
        if plan["mode"] != "path-driven":
            top = toy_system.router.similar_questions(q)[0]
            offenders.append(f"{q.id} ({kg.entity_type(q.entities[0])}) ~ {top.record.id}: "
                             f"cos {top.cosine:.3f} + overlap {top.score - top.cosine:.3f} = {top.score:.3f}")
    ok = same and twin_similar == 30 and bare_path == 50
    verdict("C4 routing determinism", ok,
            f"100 questions identical over 3 runs: {same}; twins similar {twin_similar}/30; "
            f"entity-only variants path-driven {bare_path}/50" + (f"; above theta_sim: {offenders}" if offenders else ""))


# 5 -------------------------------------------------------------------------


def _exhaustive_mwis(n, weights, edges):
    best = 0.0
    for mask in range(1 << n):
        if any(mask >> i & 1 and mask >> j & 1 for i, j in edges):
            continue
        best = max(best, sum(weights[i] for i in range(n) if mask >> i & 1))
    return best


def _independent(cg, kept):
    idx = {v: i for i, v in enumerate(cg.vertices)}
    keep = {idx[v] for v in kept}
    return not any(i in keep and j in keep for i, j in cg.edges)


def test_c5_conflict_resolution_oracle():
    rng = random.Random(5)
    mismatches, violations = 0, 0
    for case in range(200):
        n = rng.randint(1, 12)
        density = rng.random()
        edges = {(i, j): "functional" for i, j in itertools.combinations(range(n), 2) if rng.random() < density}
        weights = [round(rng.uniform(0.05, 2.0), 3) for _ in range(n)]
        cg = ConflictGraph(list(range(n)), weights, edges)
        res = resolve(cg)
        got = sum(weights[v] for v in res.kept)
        if abs(got - _exhaustive_mwis(n, weights, edges)) > 1e-9:
            mismatches += 1
        violations += not _independent(cg, res.kept)
    greedy_cases = 0
    for case in range(20):
        n = 50
        edges = {(i, j): "negation" for i, j in itertools.combinations(range(n), 2) if rng.random() < 0.15}
        cg = ConflictGraph(list(range(n)), [rng.uniform(0.05, 2.0) for _ in range(n)], edges)
        res = resolve(cg)
        greedy_cases += res.approximate
        violations += not _independent(cg, res.kept)
    ok = mismatches == 0 and violations == 0 and greedy_cases == 20
    verdict("C5 conflict resolution", ok,
            f"200 graphs <= 12 vertices, {mismatches} weight mismatches vs exhaustive MWIS; "
            f"{greedy_cases}/20 50-vertex graphs greedy; {violations} conflicting pairs kept")


# 6 -------------------------------------------------------------------------


def test_c6_toy_benchmark(tmp_path):
    t0 = time.perf_counter()
    a = run_all(TOY_DIR, tmp_path / "a")
    b = run_all(TOY_DIR, tmp_path / "b")
    elapsed = time.perf_counter() - t0
    same = a.read_bytes() == b.read_bytes()
    report = json.loads(a.read_text())["payload"]
    ok = report["hit"] == 1.0 and report["hits_at_1"] >= 0.9 and same and elapsed < 30.0
    verdict("C6 toy benchmark", ok,
            f"{report['n_questions']} questions, Hit {report['hit']:.2f}, Hits@1 {report['hits_at_1']:.2f}, "
            f"F1 {report['f1']:.3f}, byte-identical {same}, {elapsed:.2f}s for two runs")


# 7 -------------------------------------------------------------------------


def _single_subgraph(kg, base):
    pool = SegmentPool.from_base(base)
    whole = _make_subgraph(0, frozenset(kg.triples), pool, kg, (0,))
    cfg = PartitionConfig(eta_max=kg.n_entities, tau_min=1).resolved(kg.n_entities)
    return Partition(cfg, [whole], assign_colors([whole], kg), information_gain([whole], cfg, kg.n_entities),
                     [], [], kg.n_entities)


def test_c7_search_space_reduction():
    kg, train, test = four_domain_instance()
    base = QuestionBase(train)
    base.finalize()
    system = build_system(kg, base)
    answered = [answer_question(system, q) for q in test]
    split = measure_search_space([a.trace() for a in answered])
    max_active = max(len(a.plan.activated_subgraphs()) for a in answered)
    merged = build_system(kg, base, partition=_single_subgraph(kg, base))
    whole = measure_search_space([answer_question(merged, q).trace() for q in test])
    ok = max_active <= 2 and split["mean_ratio"] <= 0.6 and whole["mean_ratio"] == 1.0
    verdict("C7 search-space reduction", ok,
            f"{len(system.partition.subgraphs)} subgraphs over {len(system.allocation.groups)} agents, "
            f"<= {max_active} activated, touched ratio {split['mean_ratio']:.3f}; "
            f"single-subgraph ablation ratio {whole['mean_ratio']:.3f}")


# 8 -------------------------------------------------------------------------

FALSE_YEARS = {"Falling Orchard": "1999", "Desert Choir": "2016", "Kingfisher Lake": "2003"}


def _seeded_dataset(tmp_path):
    root = tmp_path / "seeded"
    shutil.copytree(TOY_DIR, root)
    with open(root / "kb.tsv", "a") as f:
        for movie, year in FALSE_YEARS.items():
            f.write(f"{movie}\trelease_year\t{year}\n")
    with open(root / "train.jsonl", "a") as f:
        for i, (movie, year) in enumerate(FALSE_YEARS.items()):
            text = f"in what year did {movie} come out"
            start = text.index(movie)
            f.write(json.dumps({"id": f"noisy-{i}", "question": text,
                                "entities": [{"span": [start, start + len(movie)], "name": movie}],
                                "answers": [year], "path": [movie, "release_year", year]}) + "\n")
    return load_dataset(root)


def test_c8_conflict_detection_ablation(tmp_path):
    ds = _seeded_dataset(tmp_path)
    kg = ds.kg
    seeded = {kg.entity_id(m) for m in FALSE_YEARS}
    year = kg.relation_id("release_year")
    system = build_system(ds.kg, ds.base)
    on_report, on = evaluate(system, ds.test, detect=True)
    off_report, off = evaluate(system, ds.test, detect=False)
    changed = {a.record.id for a, b in zip(on, off) if a.answers != b.answers}
    affected = {
        a.record.id for a in on
        if any(t.relation == year and t.head in seeded for t in a.fusion.tri_all)
    }
    ok = bool(affected) and changed == affected
    verdict("C8 conflict-detection ablation", ok,
            f"3 seeded contradictions; answers changed for {sorted(changed)}, affected {sorted(affected)}; "
            f"Hit on/off {on_report.hit:.2f}/{off_report.hit:.2f}, "
            f"F1 on/off {on_report.f1:.3f}/{off_report.f1:.3f}")


# 9 -------------------------------------------------------------------------


def test_c9_metric_cases():
    cases = [
        (["a"], ["a"], 1.0, 1.0, 1.0),
        (["b"], ["b", "c"], 1.0, 1.0, 2 / 3),
        (["x"], ["a"], 0.0, 0.0, 0.0),
        ([], ["a"], 0.0, 0.0, 0.0),
        (["x", "a"], ["a"], 1.0, 0.0, 2 / 3),
        (["a", "b", "c"], ["a"], 1.0, 1.0, 0.5),
        (["a", "b"], ["a", "b"], 1.0, 1.0, 1.0),
        (["a", "x", "y"], ["a", "b"], 1.0, 1.0, 0.4),
        (["x", "y", "b"], ["a", "b", "c", "d"], 1.0, 0.0, 2 / 7),
        (["c", "a"], ["a", "b", "c"], 1.0, 1.0, 0.8),
    ]
    worst = 0.0
    for pred, gold, h, h1, f in cases:
        q = evaluate_question("q", pred, gold)
        worst = max(worst, abs(hit(pred, gold) - h), abs(hit_at_1(pred, gold) - h1), abs(f1(pred, gold) - f),
                    abs(q.hit - h), abs(q.hit1 - h1), abs(q.f1 - f))
    verdict("C9 metric correctness", worst <= 1e-12, f"10 hand cases, max |diff| = {worst:.1e}")
