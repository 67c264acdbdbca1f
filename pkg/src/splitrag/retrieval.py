"""Per-agent subgraph retrieval: traversal, triple collection and evidence text."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .gateway import TEMPLATES, Gateway, GatewayError
from .kg import GraphView, KnowledgeGraph, Path, Triple
from .routing import Assignment, RetrievalPlan, Subquestion

logger = logging.getLogger(__name__)

SEP = " \u2014 "
MAX_HOPS = 2


@dataclass
class RetrievalResult:
    index: int
    agent: int
    subquestion: Subquestion
    subgraphs: tuple[int, ...]
    paths: list[Path] = field(default_factory=list)
    triples: frozenset[Triple] = frozenset()
    evidence: str = ""
    flags: tuple[str, ...] = ()
    lookups: int = 0
    elapsed: float = 0.0

    @property
    def failed(self) -> bool:
        return "failed" in self.flags

    def outputs(self) -> set[int]:
        return {p.end for p in self.paths}

    def to_json(self, kg: KnowledgeGraph, timings: bool = False) -> dict:
        obj = {
            "index": self.index,
            "agent": self.agent,
            "subgraphs": list(self.subgraphs),
            "subquestion": self.subquestion.text,
            "paths": [kg.path_names(p) for p in self.paths],
            "triples": sorted(list(kg.triple_names(t)) for t in self.triples),
            "evidence": self.evidence,
            "flags": list(self.flags),
            "lookups": self.lookups,
        }
        if timings:
            obj["elapsed"] = self.elapsed
        return obj


def match_score(path_entities: Iterable[int], target_entities: Iterable[int]) -> float:
    """|Ent(p) & Ent(t)| / |Ent(t)|."""
    target = set(target_entities)
    if not target:
        raise ValueError("match score needs at least one target entity")
    return len(set(path_entities) & target) / len(target)


def all_paths(view: GraphView, starts: Iterable[int], max_hops: int = MAX_HOPS) -> list[Path]:
    """Every simple path of 1..max_hops hops rooted at ``starts`` inside the view."""
    out: list[Path] = []
    for s in sorted(set(starts)):
        if s not in view.entities:
            continue
        stack = [Path((s,))]
        while stack:
            p = stack.pop()
            if p.hops:
                out.append(p)
            if p.hops == max_hops:
                continue
            for rel, other, inv in view.incident(p.end):
                if other not in p.entities:
                    stack.append(Path(p.entities + (other,), p.relations + (rel,), p.inverted + (inv,)))
    return sorted(out)


def traverse(
    subq: Subquestion,
    view: GraphView,
    theta_match: float = 0.5,
    anchors: Sequence[int] | None = None,
    follow_template: bool = True,
    counter: list[int] | None = None,
) -> tuple[list[Path], tuple[str, ...]]:
    """Paths of at most two hops rooted at the subquestion's anchors, kept when Match >= theta.

    ``anchors`` overrides the subquestion's own entities (chained steps bind
    them at run time). Each anchor forms its own subquestion instance, so a
    path is scored against the anchor it starts from. With no anchor at all,
    paths start from every entity of the anchor type and the Match filter is
    replaced by type-level instantiability (flagged).
    """
    flags: tuple[str, ...] = ()
    bound = list(subq.entities if anchors is None else anchors)
    typed = not bound
    if typed:
        flags = ("type-level-match",)
        bound = view.entities_of_type(subq.template.types[0])
    bound = [a for a in bound if a in view.entities]
    if not bound:
        return [], flags
    if follow_template:
        paths = view.walk(bound, subq.template, counter)
    else:
        paths = all_paths(view, bound)
    if typed:
        return paths, flags
    if anchors is None:
        kept = [p for p in paths if match_score(p.entities, subq.entities) >= theta_match]
    else:
        kept = [p for p in paths if match_score(p.entities, (p.start,)) >= theta_match]
    return kept, flags


def collect_triples(paths: Iterable[Path]) -> frozenset[Triple]:
    return frozenset(t for p in paths for t in p.triples())


def template_lines(triples: Iterable[Triple], kg: KnowledgeGraph) -> list[str]:
    return sorted(SEP.join(kg.triple_names(t)) for t in triples)


def textualize(triples: Iterable[Triple], subq: Subquestion | None, kg: KnowledgeGraph,
               gateway: Gateway | None = None) -> tuple[str, tuple[str, ...]]:
    """Evidence text plus flags ("no-evidence", "degraded")."""
    lines = template_lines(triples, kg)
    if not lines:
        return "", ("no-evidence",)
    templated = "\n".join(lines)
    if gateway is None or not gateway.live:
        return templated, ()
    prompt = TEMPLATES["summarizer"].fill(Q_sub=subq.text if subq else "", T_clean=templated)
    try:
        return gateway.complete("summarizer", prompt), ()
    except GatewayError as exc:
        logger.warning("summarizer failed, using templated evidence: %s", exc)
        return templated, ("degraded",)


def _step_levels(plan: RetrievalPlan) -> dict[int, int]:
    levels: dict[int, int] = {}
    for a in sorted(plan.assignments, key=lambda a: a.subquestion.step):
        dep = a.subquestion.depends_on
        levels[a.subquestion.step] = 0 if dep is None else levels.get(dep, 0) + 1
    return levels


class Retriever:
    def __init__(self, kg: KnowledgeGraph, views: Sequence[GraphView], gateway: Gateway | None = None,
                 theta_match: float = 0.5, workers: int = 4):
        self.kg = kg
        self.views = views
        self.gateway = gateway
        self.theta_match = theta_match
        self.workers = max(1, workers)

    def run_assignment(self, a: Assignment, anchors: Sequence[int] | None = None) -> RetrievalResult:
        t0 = time.perf_counter()
        res = RetrievalResult(a.index, a.agent, a.subquestion, a.subgraphs)
        try:
            counter = [0]
            paths: set[Path] = set()
            flags: set[str] = set()
            for sid in a.subgraphs:
                found, fl = traverse(a.subquestion, self.views[sid], self.theta_match, anchors, counter=counter)
                paths.update(found)
                flags.update(fl)
            res.paths = sorted(paths)
            res.triples = collect_triples(res.paths)
            res.evidence, ev_flags = textualize(res.triples, a.subquestion, self.kg, self.gateway)
            flags.update(ev_flags)
            if not res.paths:
                flags.add("empty")
            res.flags = tuple(sorted(flags))
            res.lookups = counter[0]
        except Exception as exc:  # isolate one assignment's failure from the rest
            logger.exception("assignment %d failed", a.index)
            res.paths, res.triples, res.evidence = [], frozenset(), ""
            res.flags = ("failed", type(exc).__name__)
        res.elapsed = time.perf_counter() - t0
        return res

    def run_plan(self, plan: RetrievalPlan, parallel: bool = True) -> list[RetrievalResult]:
        """One result per assignment, in assignment order.

        Assignments run in dependency waves; a chained step binds its anchors
        to the path ends produced by the step it depends on.
        """
        levels = _step_levels(plan)
        waves: dict[int, list[Assignment]] = {}
        for a in plan.assignments:
            waves.setdefault(levels[a.subquestion.step], []).append(a)
        results: dict[int, RetrievalResult] = {}
        outputs: dict[int, set[int]] = {}
        pool = ThreadPoolExecutor(max_workers=self.workers) if parallel else None
        try:
            for level in sorted(waves):
                jobs = []
                for a in waves[level]:
                    dep = a.subquestion.depends_on
                    anchors = None if dep is None else sorted(outputs.get(dep, ()))
                    jobs.append((a, anchors))
                if pool is not None:
                    done = list(pool.map(lambda job: self.run_assignment(*job), jobs))
                else:
                    done = [self.run_assignment(*job) for job in jobs]
                for r in done:
                    results[r.index] = r
                    outputs.setdefault(r.subquestion.step, set()).update(r.outputs())
        finally:
            if pool is not None:
                pool.shutdown()
        return [results[a.index] for a in plan.assignments]


def touched_entities(plan: RetrievalPlan, views: Sequence[GraphView]) -> int:
    """Distinct entities across the plan's activated subgraphs."""
    ents: set[int] = set()
    for sid in plan.activated_subgraphs():
        ents |= views[sid].entities
    return len(ents)
