"""Result aggregation, conflict detection and resolution, and answer synthesis."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .gateway import TEMPLATES, Gateway, GatewayError
from .kg import KnowledgeGraph, Triple
from .retrieval import RetrievalResult, template_lines
from .routing import AnswerSpec, RetrievalPlan

logger = logging.getLogger(__name__)

EXACT_LIMIT = 20
EPS = 1e-12


class FusionError(ValueError):
    pass


@dataclass
class Aggregate:
    scores: dict[Triple, float]
    provenance: dict[Triple, tuple[int, ...]]
    evidence: str
    empty: bool

    @property
    def triples(self) -> frozenset[Triple]:
        return frozenset(self.scores)


def aggregate(results: Sequence[RetrievalResult], conf: Mapping[int, float]) -> Aggregate:
    """Union of triples and evidence; s(t) sums conf over the distinct agents that returned t."""
    if not results:
        raise FusionError("nothing to aggregate")
    prov: dict[Triple, set[int]] = {}
    for r in results:
        for t in r.triples:
            prov.setdefault(t, set()).add(r.agent)
    scores = {t: sum(conf.get(a, 0.0) for a in agents) for t, agents in sorted(prov.items())}
    evidence = "\n".join(r.evidence for r in sorted(results, key=lambda r: r.index) if r.evidence)
    empty = not scores
    if empty:
        logger.warning("all retrieval results are empty")
    return Aggregate(scores, {t: tuple(sorted(a)) for t, a in sorted(prov.items())}, evidence, empty)


@dataclass
class ConflictGraph:
    vertices: list[Triple]
    scores: list[float]
    edges: dict[tuple[int, int], str] = field(default_factory=dict)

    def neighbors(self) -> list[set[int]]:
        adj = [set() for _ in self.vertices]
        for i, j in self.edges:
            adj[i].add(j)
            adj[j].add(i)
        return adj

    def components(self) -> list[list[int]]:
        adj = self.neighbors()
        seen: set[int] = set()
        comps = []
        for v in range(len(self.vertices)):
            if v in seen:
                continue
            stack, comp = [v], []
            seen.add(v)
            while stack:
                x = stack.pop()
                comp.append(x)
                for y in adj[x] - seen:
                    seen.add(y)
                    stack.append(y)
            comps.append(sorted(comp))
        return comps


def conflict_rule(a: Triple, b: Triple, kg: KnowledgeGraph) -> str | None:
    if a == b:
        return None
    if a.head == b.head and a.relation == b.relation and a.relation in kg.functional_relations \
            and a.tail != b.tail:
        return "functional"
    if a.head == b.head and a.tail == b.tail and frozenset((a.relation, b.relation)) in kg.negation_pairs:
        return "negation"
    return None


def detect_conflicts(scores: Mapping[Triple, float], kg: KnowledgeGraph) -> ConflictGraph:
    vertices = sorted(scores)
    cg = ConflictGraph(vertices, [scores[t] for t in vertices])
    by_head: dict[int, list[int]] = {}
    for i, t in enumerate(vertices):
        by_head.setdefault(t.head, []).append(i)
    for idx in by_head.values():
        for x, i in enumerate(idx):
            for j in idx[x + 1:]:
                rule = conflict_rule(vertices[i], vertices[j], kg)
                if rule:
                    cg.edges[(i, j)] = rule
    return cg


def _exact_mwis(comp: list[int], weights: Sequence[float], adj: list[set[int]]) -> list[int]:
    """Branch and bound, include-first in priority order.

    Only strictly better totals replace the incumbent, so among equal-weight
    optima the one preferring higher-priority vertices is returned.
    """
    order = sorted(comp, key=lambda v: (-weights[v], v))
    suffix = [0.0] * (len(order) + 1)
    for i in range(len(order) - 1, -1, -1):
        suffix[i] = suffix[i + 1] + weights[order[i]]
    best: list = [-1.0, []]

    def go(i: int, chosen: list[int], total: float, blocked: frozenset[int]) -> None:
        if total + suffix[i] <= best[0] + EPS:
            return
        if i == len(order):
            best[0], best[1] = total, list(chosen)
            return
        v = order[i]
        if v not in blocked:
            chosen.append(v)
            go(i + 1, chosen, total + weights[v], blocked | adj[v])
            chosen.pop()
        go(i + 1, chosen, total, blocked)

    go(0, [], 0.0, frozenset())
    return sorted(best[1])


def _greedy_mwis(comp: list[int], weights: Sequence[float], adj: list[set[int]]) -> list[int]:
    kept: list[int] = []
    blocked: set[int] = set()
    for v in sorted(comp, key=lambda v: (-weights[v], v)):
        if v not in blocked:
            kept.append(v)
            blocked |= adj[v]
    return sorted(kept)


@dataclass
class Resolution:
    kept: list[Triple]
    removed: list[Triple]
    approximate: bool


def resolve(cg: ConflictGraph, exact_limit: int = EXACT_LIMIT) -> Resolution:
    """Maximum-weight independent set per connected component of the conflict graph."""
    if any(s <= 0 for s in cg.scores):
        raise FusionError("triple scores must be positive")
    adj = cg.neighbors()
    keep: set[int] = set()
    approximate = False
    for comp in cg.components():
        if len(comp) == 1:
            keep.update(comp)
        elif len(comp) <= exact_limit:
            keep.update(_exact_mwis(comp, cg.scores, adj))
        else:
            approximate = True
            logger.warning("conflict component of %d vertices resolved greedily", len(comp))
            keep.update(_greedy_mwis(comp, cg.scores, adj))
    kept = [cg.vertices[i] for i in sorted(keep)]
    removed = [cg.vertices[i] for i in range(len(cg.vertices)) if i not in keep]
    return Resolution(kept, removed, approximate)


def _far_end(t: Triple, spec: AnswerSpec, kg: KnowledgeGraph) -> int | None:
    if kg.relation_name(t.relation) != spec.relation:
        return None
    e = t.head if spec.inverted else t.tail
    return e if kg.entity_type(e) == spec.entity_type else None


def extract_answers(clean: Mapping[Triple, float], plan: RetrievalPlan, kg: KnowledgeGraph) -> list[str]:
    """Far ends of clean triples fitting an expected answer shape, best score first, then by name."""
    topic = set(plan.topic_entities)
    best: dict[int, float] = {}
    for t, s in clean.items():
        for spec in plan.answer_specs:
            e = _far_end(t, spec, kg)
            if e is not None and e not in topic:
                best[e] = max(best.get(e, 0.0), s)
    ranked = sorted(best, key=lambda e: (-round(best[e], 12), kg.entity_name(e)))
    return [kg.entity_name(e) for e in ranked]


@dataclass
class FusionResult:
    question_id: str
    tri_all: dict[Triple, float]
    evidence: str
    tri_clean: dict[Triple, float]
    conflicts: dict[tuple[Triple, Triple], str]
    removed: list[Triple]
    answers: list[str]
    text: str
    flags: tuple[str, ...] = ()

    def to_json(self, kg: KnowledgeGraph) -> dict:
        def name(t: Triple) -> list[str]:
            return list(kg.triple_names(t))

        return {
            "question_id": self.question_id,
            "answers": self.answers,
            "text": self.text,
            "flags": list(self.flags),
            "conflicts": [
                {"a": name(a), "b": name(b), "rule": rule} for (a, b), rule in sorted(self.conflicts.items())
            ],
            "removed": [{"triple": name(t), "score": self.tri_all[t]} for t in self.removed],
            "kept": len(self.tri_clean),
            "retrieved": len(self.tri_all),
        }


def synthesize(
    clean: Mapping[Triple, float],
    evidence: str,
    question: str,
    plan: RetrievalPlan,
    kg: KnowledgeGraph,
    gateway: Gateway | None = None,
) -> tuple[list[str], str, tuple[str, ...]]:
    """Answer entities, answer text and flags.

    Offline the answer is the extraction rule alone. With a live head model
    the extracted candidates it names are kept in extraction order; if it
    names none of them, or the call fails, the extraction stands (flagged).
    """
    if not clean:
        return [], "unknown", ("no-evidence",)
    candidates = extract_answers(clean, plan, kg)
    facts = "; ".join(template_lines(clean, kg))
    if gateway is None or not gateway.live:
        text = ", ".join(candidates) if candidates else "unknown"
        return candidates, text, () if candidates else ("no-answer",)
    prompt = TEMPLATES["head-agent"].fill(T_clean=facts, E_all=evidence, q_new=question)
    try:
        text = gateway.complete("head-agent", prompt)
    except GatewayError as exc:
        logger.warning("head agent failed, using extraction: %s", exc)
        return candidates, ", ".join(candidates) or "unknown", ("degraded",)
    named = [c for c in candidates if c.lower() in text.lower()]
    if not named:
        return candidates, text, ("unparsed",)
    return named, text, ()


def fuse(
    results: Sequence[RetrievalResult],
    plan: RetrievalPlan,
    question: str,
    kg: KnowledgeGraph,
    gateway: Gateway | None = None,
    detect: bool = True,
    exact_limit: int = EXACT_LIMIT,
) -> FusionResult:
    flags: list[str] = []
    if not results:
        # unroutable plan: the head model answers without retrieval
        answers, text, fl = synthesize({}, "", question, plan, kg, gateway)
        return FusionResult(plan.question_id, {}, "", {}, {}, [], answers, text, ("no-retrieval",) + fl)
    agg = aggregate(results, plan.conf)
    if agg.empty:
        flags.append("empty-aggregate")
    conflicts: dict[tuple[Triple, Triple], str] = {}
    if detect and agg.scores:
        cg = detect_conflicts(agg.scores, kg)
        conflicts = {(cg.vertices[i], cg.vertices[j]): r for (i, j), r in sorted(cg.edges.items())}
        res = resolve(cg, exact_limit)
        if res.approximate:
            flags.append("approximate-resolution")
        clean = {t: agg.scores[t] for t in res.kept}
        removed = res.removed
    else:
        clean, removed = dict(agg.scores), []
        if not detect:
            flags.append("conflict-detection-off")
    answers, text, fl = synthesize(clean, agg.evidence, question, plan, kg, gateway)
    return FusionResult(plan.question_id, agg.scores, agg.evidence, clean, conflicts, removed, answers, text,
                        tuple(flags) + fl)

