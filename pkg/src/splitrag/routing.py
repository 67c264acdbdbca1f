"""Retrieval planning: similar-question guided or path-driven decomposition."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .allocation import Allocation
from .kg import GraphView, KnowledgeGraph, Pattern, split_into_segments
from .partition import Partition
from .questions import QuestionBase, QuestionRecord

CONF_FLOOR = 0.05


class RoutingError(ValueError):
    pass


@dataclass(frozen=True)
class RouterConfig:
    k: int = 5
    alpha: float = 0.5
    beta: float = 0.1
    theta_sim: float = 0.85
    theta_match: float = 0.5
    theta_align: float = 0.5

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise RoutingError("alpha and beta must be >= 0")
        for name in ("theta_sim", "theta_match", "theta_align"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise RoutingError(f"{name} must lie in [0, 1]")


@dataclass(frozen=True)
class AnswerSpec:
    """Far end of the final hop: relation, traversal direction and entity type."""

    relation: str
    inverted: bool
    entity_type: str


@dataclass(frozen=True)
class Subquestion:
    text: str
    step: int
    template: Pattern
    # bound anchor entities; empty for chained or type-anchored steps
    entities: tuple[int, ...]
    source: str  # "template-adapted" or "path-segment"
    depends_on: int | None = None

    @property
    def anchor_type(self) -> str:
        return self.template.types[0]

    @property
    def answer_type(self) -> str:
        return self.template.types[-1]

    def to_json(self, kg: KnowledgeGraph) -> dict:
        return {
            "text": self.text,
            "step": self.step,
            "template": self.template.to_json(),
            "entities": [kg.entity_name(e) for e in self.entities],
            "source": self.source,
            "depends_on": self.depends_on,
        }

    @classmethod
    def from_json(cls, obj: dict, kg: KnowledgeGraph) -> "Subquestion":
        return cls(obj["text"], obj["step"], Pattern.from_json(obj["template"]),
                   tuple(kg.entity_id(n) for n in obj["entities"]), obj["source"], obj["depends_on"])


@dataclass
class Assignment:
    index: int
    subquestion: Subquestion
    agent: int
    subgraphs: tuple[int, ...]
    score: float
    rerouted: bool = False


@dataclass
class RetrievalPlan:
    question_id: str
    mode: str  # "similar" or "path-driven"
    assignments: list[Assignment] = field(default_factory=list)
    conf: dict[int, float] = field(default_factory=dict)
    answer_specs: tuple[AnswerSpec, ...] = ()
    topic_entities: tuple[int, ...] = ()
    similar_to: str | None = None
    similarity: float | None = None
    mixed: bool = False

    @property
    def unroutable(self) -> bool:
        return not self.assignments

    def activated_subgraphs(self) -> list[int]:
        return sorted({s for a in self.assignments for s in a.subgraphs})

    def to_json(self, kg: KnowledgeGraph) -> dict:
        return {
            "question_id": self.question_id,
            "mode": self.mode,
            "mixed": self.mixed,
            "unroutable": self.unroutable,
            "similar_to": self.similar_to,
            "similarity": self.similarity,
            "topic_entities": [kg.entity_name(e) for e in self.topic_entities],
            "answer_specs": [asdict(s) for s in self.answer_specs],
            "assignments": [
                {
                    "index": a.index,
                    "agent": a.agent,
                    "subgraphs": list(a.subgraphs),
                    "score": a.score,
                    "rerouted": a.rerouted,
                    "subquestion": a.subquestion.to_json(kg),
                }
                for a in self.assignments
            ],
            "conf": {str(k): v for k, v in sorted(self.conf.items())},
        }

    @classmethod
    def from_json(cls, obj: dict, kg: KnowledgeGraph) -> "RetrievalPlan":
        assignments = [
            Assignment(a["index"], Subquestion.from_json(a["subquestion"], kg), a["agent"],
                       tuple(a["subgraphs"]), a["score"], a["rerouted"])
            for a in obj["assignments"]
        ]
        return cls(
            obj["question_id"],
            obj["mode"],
            assignments,
            {int(k): v for k, v in obj["conf"].items()},
            tuple(AnswerSpec(**s) for s in obj["answer_specs"]),
            tuple(kg.entity_id(n) for n in obj["topic_entities"]),
            obj["similar_to"],
            obj["similarity"],
            obj["mixed"],
        )


@dataclass(frozen=True)
class ScoredQuestion:
    record: QuestionRecord
    score: float
    cosine: float
    rank: int
    path_overlap: float


def agent_confidence(plan: RetrievalPlan) -> dict[int, float]:
    """Mean assignment match score per agent, clamped to [0.05, 1]."""
    scores: dict[int, list[float]] = {}
    for a in plan.assignments:
        scores.setdefault(a.agent, []).append(a.score)
    return {ag: min(1.0, max(CONF_FLOOR, sum(v) / len(v))) for ag, v in sorted(scores.items())}


def jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


def render_subquestion(kg: KnowledgeGraph, template: Pattern, entities: Sequence[int]) -> str:
    head = " | ".join(f"[{kg.entity_name(e)}]" for e in entities) if entities else f"?{template.types[0]}"
    parts = [head]
    for (rel, inv), t in zip(template.steps, template.types[1:]):
        parts.append(f"<-[{rel}]-" if inv else f"-[{rel}]->")
        parts.append(f"?{t}")
    return " ".join(parts)


def _shares_prefix(a: str, b: str, n: int = 5) -> bool:
    return a == b or (len(a) >= n and len(b) >= n and a[:n] == b[:n])


class Router:
    """Stateless planner over an immutable base, partition and allocation."""

    def __init__(
        self,
        kg: KnowledgeGraph,
        base: QuestionBase,
        partition: Partition,
        allocation: Allocation,
        cfg: RouterConfig | None = None,
    ):
        self.kg = kg
        self.base = base
        self.partition = partition
        self.allocation = allocation
        self.cfg = cfg or RouterConfig()
        self.views = [GraphView(kg, sg.triples) for sg in partition.subgraphs]
        self._segment_patterns = {
            r.id: {kg.pattern_of(seg).canonical() for p in r.paths for seg in split_into_segments(p)}
            for r in base.records
        }

    # similarity -----------------------------------------------------------

    def inferable_patterns(self, q: QuestionRecord) -> set[Pattern]:
        """Canonical 1/2-hop type patterns rooted at the question's linked entities."""
        out: set[Pattern] = set()
        for pat in self._anchored_patterns(q.entities):
            out.add(pat[1].canonical())
        return out

    def _anchored_patterns(self, entities: Sequence[int]) -> list[tuple[int, Pattern]]:
        kg = self.kg
        seen: set[tuple[int, Pattern]] = set()
        for e in dict.fromkeys(entities):
            te = kg.entity_type(e)
            for r1, x, inv1 in kg.incident(e):
                tx = kg.entity_type(x)
                step1 = (kg.relation_name(r1), inv1)
                seen.add((e, Pattern((te, tx), (step1,))))
                for r2, y, inv2 in kg.incident(x):
                    if y == e:
                        continue
                    seen.add((e, Pattern((te, tx, kg.entity_type(y)), (step1, (kg.relation_name(r2), inv2)))))
        return sorted(seen)

    def similar_questions(self, q_new: QuestionRecord) -> list[ScoredQuestion]:
        vec = self.base.vectorize(q_new.entity_type_tokens)
        cands = []
        for order, rec in enumerate(self.base.records):
            v = self.base.vector(rec.id)
            if v is None:
                continue
            cands.append((vec.cosine(v), order, rec))
        if not cands:
            return []
        cands.sort(key=lambda c: (-c[0], c[1]))
        inferable = self.inferable_patterns(q_new)
        scored = []
        for rank, (cos, _, rec) in enumerate(cands):
            decay = 1.0 if rank == 0 else math.exp(-self.cfg.beta * rank)
            overlap = jaccard(inferable, self._segment_patterns[rec.id]) if inferable else 0.0
            scored.append(ScoredQuestion(rec, cos * decay + self.cfg.alpha * overlap, cos, rank, overlap))
        scored.sort(key=lambda s: (-s.score, s.rank))
        return scored[: self.cfg.k]

    # matching helpers -----------------------------------------------------

    def path_match(self, template: Pattern, sid: int, anchors: Sequence[int] = ()) -> float:
        """Share of template steps instantiable inside subgraph ``sid``.

        With anchors, steps must chain from one of them (entity level);
        without, each step's type/relation shape just has to occur.
        """
        view = self.views[sid]
        if anchors:
            best = max((view.instantiable_prefix(a, template) for a in anchors), default=0)
        else:
            best = view.type_level_steps(template)
        return best / template.hops

    def cover(self, template: Pattern, anchors: Sequence[int], sid: int) -> float:
        view = self.views[sid]
        if any(a not in view.entities for a in anchors):
            return 0.0
        types = set(template.types)
        return len(types & view.types) / len(types)

    def _candidates(self, template: Pattern, anchors: Sequence[int],
                    upstream: Sequence[int] | None) -> dict[int, float]:
        """Subgraphs able to serve a step, with their match score."""
        out = {}
        for sid, view in enumerate(self.views):
            if upstream is not None:
                shared = set()
                for u in upstream:
                    shared |= self.views[u].entities
                starts = [e for e in view.entities & shared if self.kg.entity_type(e) == template.types[0]]
                score = self.path_match(template, sid, sorted(starts)) if starts else 0.0
            elif anchors:
                if not any(a in view.entities for a in anchors):
                    continue
                score = self.path_match(template, sid, anchors)
            else:
                score = self.path_match(template, sid)
            if score >= self.cfg.theta_match and score > 0:
                out[sid] = score
        return out

    def _by_agent(self, cands: dict[int, float]) -> dict[int, tuple[float, tuple[int, ...]]]:
        agents: dict[int, list[int]] = {}
        for sid in sorted(cands):
            agents.setdefault(self.allocation.owner[sid], []).append(sid)
        return {ag: (max(cands[s] for s in sids), tuple(sids)) for ag, sids in sorted(agents.items())}

    def _pick_agent(self, by_agent: dict[int, tuple[float, tuple[int, ...]]], load: dict[int, int]) -> int:
        return max(by_agent, key=lambda ag: (by_agent[ag][0] / (1 + load.get(ag, 0)), -ag))

    # planning -------------------------------------------------------------

    def plan_by_similarity(self, q_new: QuestionRecord, q_sim: ScoredQuestion) -> RetrievalPlan:
        pattern = q_sim.record.pattern
        if not pattern:
            return self.plan_by_paths(q_new)
        plan = RetrievalPlan(q_new.id, "similar", topic_entities=q_new.entities,
                             similar_to=q_sim.record.id, similarity=q_sim.score)
        load: dict[int, int] = {}
        used: set[int] = set()
        routed_steps: dict[int, list[int]] = {}
        for j, step in enumerate(pattern):
            tpl = step.template
            anchors: tuple[int, ...] = ()
            upstream = None
            depends = None
            if step.anchor == "entity":
                match = [e for e in q_new.entities if self.kg.entity_type(e) == tpl.types[0]]
                fresh = [e for e in match if e not in used]
                if match:
                    anchors = (fresh or match)[0],
                    used.add(anchors[0])
                else:
                    plan.mixed = True
            elif step.anchor == "chain":
                depends = j - 1
                upstream = routed_steps.get(j - 1)
                if not upstream:
                    plan.mixed = True
                    continue
            cands = self._candidates(tpl, anchors, upstream)
            if not cands:
                plan.mixed = True
                continue
            by_agent = self._by_agent(cands)
            sq = Subquestion(render_subquestion(self.kg, tpl, anchors), j, tpl, anchors, "template-adapted", depends)
            stored_ok = (
                step.agent in by_agent
                and step.subgraphs
                and max(self.cover(tpl, anchors, s) for s in step.subgraphs) >= self.cfg.theta_align
            )
            if upstream is not None:
                # anchors of a chained step are only known at retrieval time: every owner serves
                order = sorted(by_agent, key=lambda ag: (ag != step.agent, -by_agent[ag][0], ag))
                chosen = [(ag, not (stored_ok and ag == step.agent)) for ag in order]
            elif stored_ok:
                chosen = [(step.agent, False)]
            else:
                chosen = [(self._pick_agent(by_agent, load), True)]
            for ag, rerouted in chosen:
                score, sids = by_agent[ag]
                plan.assignments.append(Assignment(len(plan.assignments), sq, ag, sids, score, rerouted))
                load[ag] = load.get(ag, 0) + 1
                plan.mixed |= rerouted and upstream is None
                routed_steps.setdefault(j, []).extend(sids)
        last = pattern[-1].template
        plan.answer_specs = (AnswerSpec(last.steps[-1][0], last.steps[-1][1], last.types[-1]),)
        plan.conf = agent_confidence(plan)
        return plan

    def _cues(self, q: QuestionRecord) -> tuple[set[str], set[str]]:
        ctx = q.contexts
        marks = set(ctx.entity_positions)
        types = set(self.kg.type_index)
        type_cues = {t for i, t in enumerate(ctx.entity_type) if i not in marks and t in types}
        rel_cues = set()
        words = [w for i, w in enumerate(ctx.semantic) if i not in marks]
        for rel in self.kg.relation_names:
            parts = rel.lower().split("_")
            if any(_shares_prefix(w, p) for w in words for p in parts):
                rel_cues.add(rel)
        return type_cues, rel_cues

    def plan_by_paths(self, q_new: QuestionRecord) -> RetrievalPlan:
        """Anchor atomic 1/2-hop patterns at the linked entities and pick an agent per pattern."""
        if not q_new.entities:
            raise RoutingError(f"question {q_new.id} has no linked entity to route from")
        patterns = self._anchored_patterns(q_new.entities)
        type_cues, rel_cues = self._cues(q_new)
        if type_cues:
            kept = [p for p in patterns if p[1].types[-1] in type_cues]
            patterns = kept or patterns
        if rel_cues:
            kept = [p for p in patterns if p[1].steps[-1][0] in rel_cues]
            patterns = kept or patterns

        plan = RetrievalPlan(q_new.id, "path-driven", topic_entities=q_new.entities)
        load: dict[int, int] = {}
        specs: list[AnswerSpec] = []
        for j, (anchor, tpl) in enumerate(patterns):
            cands = self._candidates(tpl, (anchor,), None)
            if not cands:
                continue
            by_agent = self._by_agent(cands)
            ag = self._pick_agent(by_agent, load)
            score, sids = by_agent[ag]
            sq = Subquestion(render_subquestion(self.kg, tpl, (anchor,)), j, tpl, (anchor,), "path-segment")
            plan.assignments.append(Assignment(len(plan.assignments), sq, ag, sids, score))
            load[ag] = load.get(ag, 0) + 1
            spec = AnswerSpec(tpl.steps[-1][0], tpl.steps[-1][1], tpl.types[-1])
            if spec not in specs:
                specs.append(spec)
        plan.answer_specs = tuple(specs)
        plan.conf = agent_confidence(plan)
        return plan

    def route(self, q_new: QuestionRecord) -> RetrievalPlan:
        for cand in self.similar_questions(q_new):
            if cand.score < self.cfg.theta_sim:
                break
            if cand.record.pattern:
                return self.plan_by_similarity(q_new, cand)
        return self.plan_by_paths(q_new)
