"""Question-centric grouping of subgraphs into agent territories."""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .kg import KnowledgeGraph, split_into_segments
from .partition import Partition, Subgraph
from .questions import PatternStep, QuestionBase

logger = logging.getLogger(__name__)


@dataclass
class AssociationMatrix:
    question_ids: list[str]
    values: np.ndarray
    path_counts: list[int]

    def coverage_sets(self) -> list[frozenset[int]]:
        return [frozenset(int(j) for j in np.flatnonzero(row > 0)) for row in self.values]


def build_matrix(base: QuestionBase, subgraphs: Sequence[Subgraph]) -> AssociationMatrix:
    """A[i, j] = share of question i's paths whose triples all sit inside subgraph j."""
    ids, rows, counts = [], [], []
    for rec in base.records:
        row = np.zeros(len(subgraphs))
        if not rec.paths:
            logger.warning("question %s has no path context; association row is zero", rec.id)
        for p in rec.paths:
            trs = set(p.triples())
            for j, sg in enumerate(subgraphs):
                if trs <= sg.triples:
                    row[j] += 1
        if rec.paths:
            row /= len(rec.paths)
        ids.append(rec.id)
        rows.append(row)
        counts.append(len(rec.paths))
    values = np.vstack(rows) if rows else np.zeros((0, len(subgraphs)))
    return AssociationMatrix(ids, values, counts)


def coverage_density(c_i: frozenset[int], all_sets: Iterable[frozenset[int]]) -> float:
    if not c_i:
        return 0.0
    return sum(len(c_i & c_j) for c_j in all_sets) / math.sqrt(len(c_i))


def _cosine(a: dict[str, float], b: dict[str, float]) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0 or nb == 0:
        return 0.0
    return sum(v * b.get(k, 0.0) for k, v in a.items()) / (na * nb)


def centroid(signatures: Sequence[dict[str, float]]) -> dict[str, float]:
    out: Counter = Counter()
    for sig in signatures:
        out.update(sig)
    return {k: v / len(signatures) for k, v in sorted(out.items())}


def group_coherence(signatures: Sequence[dict[str, float]]) -> float:
    """Mean cosine between each member signature and the group centroid."""
    if not signatures:
        raise ValueError("coherence of an empty group")
    mu = centroid(signatures)
    return sum(_cosine(s, mu) for s in signatures) / len(signatures)


@dataclass
class AgentGroup:
    id: int
    members: tuple[int, ...]
    centroid: dict[str, float]
    coherence: float
    origin: str  # "loop" or "leftover"
    flagged: bool = False
    # leftover subgraphs placed after the commit loop
    absorbed: tuple[int, ...] = ()

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "members": list(self.members),
            "centroid": self.centroid,
            "coherence": self.coherence,
            "origin": self.origin,
            "flagged": self.flagged,
            "absorbed": list(self.absorbed),
        }


@dataclass
class Allocation:
    groups: list[AgentGroup]
    owner: dict[int, int]
    n_max: int
    theta_coh: float
    coordination_cost: dict[str, int] = field(default_factory=dict)
    audit: dict[str, list[int]] = field(default_factory=dict)

    def group(self, gid: int) -> AgentGroup:
        return self.groups[gid]

    def subgraphs_of(self, agent: int) -> tuple[int, ...]:
        return self.groups[agent].members

    def to_json(self) -> dict:
        return {
            "n_max": self.n_max,
            "theta_coh": self.theta_coh,
            "groups": [g.to_json() for g in self.groups],
            "coordination_cost": self.coordination_cost,
            "audit": self.audit,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Allocation":
        groups = [
            AgentGroup(g["id"], tuple(g["members"]), dict(g["centroid"]), g["coherence"], g["origin"],
                       g["flagged"], tuple(g["absorbed"]))
            for g in obj["groups"]
        ]
        owner = {m: g.id for g in groups for m in g.members}
        return cls(groups, owner, obj["n_max"], obj["theta_coh"], dict(obj["coordination_cost"]),
                   {k: list(v) for k, v in obj["audit"].items()})


def _make_group(gid: int, members: Sequence[int], subgraphs: Sequence[Subgraph], origin: str,
                theta_coh: float, absorbed: Sequence[int] = ()) -> AgentGroup:
    sigs = [subgraphs[m].signature for m in members]
    coh = group_coherence(sigs)
    late = origin == "leftover" or bool(absorbed)
    return AgentGroup(gid, tuple(sorted(members)), centroid(sigs), coh, origin,
                      flagged=late and coh < theta_coh, absorbed=tuple(sorted(absorbed)))


def allocate(
    subgraphs: Sequence[Subgraph],
    coverage: Sequence[frozenset[int]],
    n_max: int = 5,
    theta_coh: float = 0.3,
    question_ids: Sequence[str] | None = None,
) -> Allocation:
    """Commit dense coverage sets as agent groups, then place leftovers.

    Every subgraph ends up in exactly one group and no group exceeds
    ``n_max``. Loop-committed groups meet ``theta_coh``; leftover placement
    may not, and such groups are flagged.
    """
    if not subgraphs:
        raise ValueError("nothing to allocate")
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    question_ids = list(question_ids) if question_ids is not None else [str(i) for i in range(len(coverage))]
    freq = Counter(j for c in coverage for j in c)

    assigned: dict[int, int] = {}
    groups: list[AgentGroup] = []
    entries: list[frozenset[int]] = [c for c in coverage if c]

    while True:
        entries = [c - assigned.keys() for c in entries]
        entries = [c for c in entries if c]
        if not entries:
            break
        dens = [coverage_density(c, entries) for c in entries]
        best = min(range(len(entries)), key=lambda i: (-round(dens[i], 12), i))
        chosen = entries[best]
        cand = sorted(chosen)
        rest: list[int] = []
        if len(cand) > n_max:
            ranked = sorted(cand, key=lambda j: (-freq[j], j))
            cand, rest = sorted(ranked[:n_max]), sorted(ranked[n_max:])
        if group_coherence([subgraphs[j].signature for j in cand]) >= theta_coh:
            g = _make_group(len(groups), cand, subgraphs, "loop", theta_coh)
            groups.append(g)
            for j in cand:
                assigned[j] = g.id
            taken = set(cand)
            entries = [c for i, c in enumerate(entries) if i != best and not (c & taken)]
            if rest:
                entries.append(frozenset(rest))
        else:
            del entries[best]

    for j in range(len(subgraphs)):
        if j in assigned:
            continue
        open_groups = [g for g in groups if len(g.members) < n_max]
        if open_groups:
            target = max(open_groups, key=lambda g: (_cosine(subgraphs[j].signature, g.centroid), -g.id))
            g = _make_group(target.id, target.members + (j,), subgraphs, target.origin, theta_coh,
                            target.absorbed + (j,))
            groups[target.id] = g
        else:
            g = _make_group(len(groups), [j], subgraphs, "leftover", theta_coh)
            groups.append(g)
        assigned[j] = g.id
        if g.flagged:
            logger.warning("leftover subgraph %d placed in group %d; coherence %.3f below %.3f",
                           j, g.id, g.coherence, theta_coh)

    owner = dict(sorted(assigned.items()))
    audit = {qid: sorted({owner[j] for j in c}) for qid, c in zip(question_ids, coverage)}
    cost = {
        "by_subgraphs": sum(math.ceil(len(c) / n_max) for c in coverage),
        "by_agents": sum(len(v) for v in audit.values()),
    }
    return Allocation(groups, owner, n_max, theta_coh, cost, audit)


def allocate_partition(base: QuestionBase, partition: Partition, n_max: int = 5,
                       theta_coh: float = 0.3) -> tuple[Allocation, AssociationMatrix]:
    matrix = build_matrix(base, partition.subgraphs)
    alloc = allocate(partition.subgraphs, matrix.coverage_sets(), n_max, theta_coh, matrix.question_ids)
    return alloc, matrix


def decomposition_pattern(rec, kg: KnowledgeGraph, partition: Partition, alloc: Allocation) -> list[PatternStep]:
    """Per-segment (template, agent, subgraphs) steps for a training question's first path."""
    path = rec.path
    if path is None:
        return []
    steps = []
    for j, seg in enumerate(split_into_segments(path)):
        if j == 0:
            if seg.start in rec.entities:
                anchor = "entity"
            elif seg.end in rec.entities:
                seg, anchor = seg.reversed(), "entity"
            else:
                anchor = "type"
        else:
            anchor = "chain"
        trs = set(seg.triples())
        holders = [sg.id for sg in partition.subgraphs if trs <= sg.triples]
        if holders:
            agent = alloc.owner[holders[0]]
            subs = tuple(h for h in holders if alloc.owner[h] == agent)
        else:
            agent, subs = None, ()
        steps.append(PatternStep(kg.pattern_of(seg), anchor, agent, subs))
    return steps


def record_patterns(base: QuestionBase, kg: KnowledgeGraph, partition: Partition, alloc: Allocation) -> None:
    for rec in list(base.records):
        if rec.paths:
            base.set_pattern(rec.id, decomposition_pattern(rec, kg, partition, alloc))
