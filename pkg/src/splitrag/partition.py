"""Information-gain driven partitioning of the graph along training-path segments."""
from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable

from .kg import KnowledgeGraph, Path, Triple, split_into_segments
from .questions import QuestionBase

logger = logging.getLogger(__name__)

# rounding applied to merge gains before comparing them, so ties are ties
_GAIN_DIGITS = 12


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class PartitionConfig:
    lam: float = 0.5
    eta_max: int | None = None  # None -> ceil(|V| / 4)
    theta_merge: float = 0.0
    t_max: int = 1000
    tau_min: int = 3
    # +1 sums H(P|s) as printed; -1 rewards concentrated path distributions
    entropy_sign: int = 1

    def resolved(self, n_entities: int) -> "PartitionConfig":
        cfg = self if self.eta_max is not None else replace(self, eta_max=max(2, math.ceil(n_entities / 4)))
        if cfg.lam < 0:
            raise PartitionError("lam must be >= 0")
        if cfg.eta_max < 2:
            raise PartitionError("eta_max must be >= 2")
        if cfg.tau_min > cfg.eta_max:
            raise PartitionError("tau_min must not exceed eta_max")
        if cfg.entropy_sign not in (1, -1):
            raise PartitionError("entropy_sign must be +1 or -1")
        return cfg

    def to_json(self) -> dict:
        return asdict(self)


class SegmentPool:
    """Multiset of training-path segments with a triple -> segment index."""

    def __init__(self, counts: dict[Path, int]):
        self.counts = dict(sorted(counts.items()))
        self._by_triple: dict[Triple, list[Path]] = defaultdict(list)
        self._triples = {seg: frozenset(seg.triples()) for seg in self.counts}
        for seg, trs in self._triples.items():
            for tr in trs:
                self._by_triple[tr].append(seg)

    @classmethod
    def from_base(cls, base: QuestionBase) -> "SegmentPool":
        counts: Counter = Counter()
        for rec in base.records:
            for p in rec.paths:
                for seg in split_into_segments(p):
                    counts[seg.canonical()] += 1
        return cls(counts)

    def __len__(self) -> int:
        return len(self.counts)

    def triples_of(self, seg: Path) -> frozenset[Triple]:
        return self._triples[seg]

    def support_for(self, triples: frozenset[Triple]) -> dict[Path, int]:
        """Segments (with multiplicity) whose triples all lie in ``triples``."""
        touched = {seg for tr in triples for seg in self._by_triple.get(tr, ())}
        return {seg: self.counts[seg] for seg in sorted(touched) if self._triples[seg] <= triples}


@dataclass
class Subgraph:
    id: int
    entities: frozenset[int]
    triples: frozenset[Triple]
    support: dict[Path, int] = field(default_factory=dict)
    signature: dict[str, int] = field(default_factory=dict)
    # candidate ids folded into this subgraph
    members: tuple[int, ...] = ()

    @property
    def size(self) -> int:
        return len(self.entities)


def signature_of(triples: Iterable[Triple], kg: KnowledgeGraph) -> dict[str, int]:
    """(entity type, relation) frequency vector, keyed ``"type|relation"``."""
    sig: Counter = Counter()
    for tr in triples:
        rel = kg.relation_name(tr.relation)
        sig[f"{kg.entity_type(tr.head)}|{rel}"] += 1
        sig[f"{kg.entity_type(tr.tail)}|{rel}"] += 1
    return dict(sorted(sig.items()))


def _make_subgraph(sid: int, triples: frozenset[Triple], pool: SegmentPool, kg: KnowledgeGraph,
                   members: tuple[int, ...]) -> Subgraph:
    ents = frozenset(e for tr in triples for e in (tr.head, tr.tail))
    return Subgraph(sid, ents, triples, pool.support_for(triples), signature_of(triples, kg), members)


def is_connected(sg: Subgraph) -> bool:
    if not sg.entities:
        return True
    parent = {e: e for e in sg.entities}

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for tr in sg.triples:
        parent[find(tr.head)] = find(tr.tail)
    return len({find(e) for e in sg.entities}) == 1


def _pack(units: list[frozenset[Triple]], eta_max: int) -> list[frozenset[Triple]]:
    """Split a connected group of triple units into connected chunks of at most ``eta_max`` entities."""
    def ents(trs):
        return {e for tr in trs for e in (tr.head, tr.tail)}

    flat: list[frozenset[Triple]] = []
    for u in units:
        if len(ents(u)) > eta_max:
            flat.extend(frozenset([tr]) for tr in sorted(u))
        else:
            flat.append(u)
    remaining = list(flat)
    chunks = []
    while remaining:
        chunk = set(remaining.pop(0))
        chunk_ents = ents(chunk)
        grown = True
        while grown:
            grown = False
            for i, u in enumerate(remaining):
                ue = ents(u)
                if ue & chunk_ents and len(ue | chunk_ents) <= eta_max:
                    chunk |= u
                    chunk_ents |= ue
                    del remaining[i]
                    grown = True
                    break
        chunks.append(frozenset(chunk))
    return chunks


def seed_candidates(base: QuestionBase, kg: KnowledgeGraph, pool: SegmentPool | None = None,
                    eta_max: int | None = None) -> list[Subgraph]:
    """One candidate per connected group of same-pattern segments.

    Groups larger than ``eta_max`` entities are split into connected chunks
    that fit, so every seed already respects the size cap.
    """
    pool = SegmentPool.from_base(base) if pool is None else pool
    if not pool.counts:
        raise PartitionError("no path-annotated training questions to seed from")

    groups: dict[tuple, list[Path]] = defaultdict(list)
    for seg in pool.counts:
        pat = kg.pattern_of(seg).canonical()
        groups[(pat.types[0], pat.types[-1], pat.steps)].append(seg)

    seeds: list[frozenset[Triple]] = []
    for key in sorted(groups):
        segs = groups[key]
        parent = list(range(len(segs)))

        def find(x: int) -> int:
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        owner: dict[int, int] = {}
        for i, seg in enumerate(segs):
            for e in seg.entities:
                if e in owner:
                    parent[find(i)] = find(owner[e])
                else:
                    owner[e] = i
        comps: dict[int, list[frozenset[Triple]]] = defaultdict(list)
        for i, seg in enumerate(segs):
            comps[find(i)].append(pool.triples_of(seg))
        for _, units in sorted(comps.items()):
            merged = frozenset().union(*units)
            if eta_max is None or len({e for tr in merged for e in (tr.head, tr.tail)}) <= eta_max:
                seeds.append(merged)
            else:
                seeds.extend(_pack(units, eta_max))
    return [_make_subgraph(i, trs, pool, kg, (i,)) for i, trs in enumerate(seeds)]


# ---------------------------------------------------------------------------
# information gain


@dataclass
class IgEntry:
    subgraph: int
    conditional_entropy: float
    size_penalty: float
    contribution: float


@dataclass
class IgReport:
    entries: list[IgEntry]
    total: float
    lam: float
    n_entities: int
    log_base: str = "e"

    def to_json(self) -> dict:
        return {
            "log_base": self.log_base,
            "lam": self.lam,
            "n_entities": self.n_entities,
            "total": self.total,
            "subgraphs": [asdict(e) for e in self.entries],
        }


def conditional_entropy(support: dict[Path, int]) -> float:
    """Shannon entropy (nats) of the segment distribution inside one subgraph."""
    total = sum(support.values())
    if total == 0:
        return 0.0
    h = 0.0
    for c in support.values():
        p = c / total
        h -= p * math.log(p)
    return h


def size_penalty(n_sub: int, n_total: int) -> float:
    if n_sub <= 0 or n_total <= 0:
        return 0.0
    frac = n_sub / n_total
    return frac * math.log(1.0 / frac)


def _ig_terms(sg: Subgraph, cfg: PartitionConfig, n_total: int) -> tuple[float, float, float]:
    if not sg.support:
        logger.warning("subgraph %d has empty segment support; conditional entropy taken as 0", sg.id)
    h = conditional_entropy(sg.support)
    hs = size_penalty(sg.size, n_total)
    return h, hs, cfg.entropy_sign * h - cfg.lam * hs


def information_gain(subgraphs: Iterable[Subgraph], cfg: PartitionConfig, n_entities: int) -> IgReport:
    entries = []
    for sg in subgraphs:
        h, hs, c = _ig_terms(sg, cfg, n_entities)
        entries.append(IgEntry(sg.id, h, hs, c))
    return IgReport(entries, math.fsum(e.contribution for e in entries), cfg.lam, n_entities)


# ---------------------------------------------------------------------------
# merging


@dataclass
class MergeStep:
    kind: str  # "greedy" or "absorb"
    a: int
    b: int
    gain: float
    ig_before: float
    ig_after: float
    size: int


class _Merger:
    def __init__(self, candidates: list[Subgraph], cfg: PartitionConfig, n_entities: int,
                 pool: SegmentPool, kg: KnowledgeGraph):
        self.cfg = cfg
        self.n = n_entities
        self.pool = pool
        self.kg = kg
        self.live: dict[int, Subgraph] = {sg.id: sg for sg in candidates}
        self.ig: dict[int, float] = {sg.id: _ig_terms(sg, cfg, n_entities)[2] for sg in candidates}
        self.by_entity: dict[int, set[int]] = defaultdict(set)
        for sg in candidates:
            for e in sg.entities:
                self.by_entity[e].add(sg.id)
        self.log: list[MergeStep] = []
        self._pairs: dict[tuple[int, int], tuple[float, Subgraph]] = {}

    def total(self) -> float:
        return math.fsum(self.ig[i] for i in sorted(self.live))

    def overlapping(self, sid: int) -> list[int]:
        out = set()
        for e in self.live[sid].entities:
            out.update(self.by_entity[e])
        out.discard(sid)
        return sorted(out)

    def union(self, a: int, b: int) -> Subgraph | None:
        sa, sb = self.live[a], self.live[b]
        if len(sa.entities | sb.entities) > self.cfg.eta_max:
            return None
        lo, hi = min(a, b), max(a, b)
        return _make_subgraph(lo, sa.triples | sb.triples, self.pool, self.kg,
                              tuple(sorted(sa.members + sb.members)))

    def gain(self, a: int, b: int) -> tuple[float, Subgraph] | None:
        key = (min(a, b), max(a, b))
        if key not in self._pairs:
            merged = self.union(*key)
            if merged is None:
                self._pairs[key] = None
            else:
                g = _ig_terms(merged, self.cfg, self.n)[2] - self.ig[key[0]] - self.ig[key[1]]
                self._pairs[key] = (g, merged)
        return self._pairs[key]

    def apply(self, kind: str, a: int, b: int) -> MergeStep:
        g, merged = self.gain(a, b)
        before = self.total()
        lo, hi = min(a, b), max(a, b)
        for sid in (lo, hi):
            for e in self.live[sid].entities:
                self.by_entity[e].discard(sid)
            del self.live[sid]
            del self.ig[sid]
        self._pairs = {k: v for k, v in self._pairs.items() if lo not in k and hi not in k}
        self.live[lo] = merged
        self.ig[lo] = _ig_terms(merged, self.cfg, self.n)[2]
        for e in merged.entities:
            self.by_entity[e].add(lo)
        step = MergeStep(kind, lo, hi, g, before, self.total(), merged.size)
        self.log.append(step)
        return step

    def greedy(self) -> None:
        for _ in range(self.cfg.t_max):
            best = None
            for a in sorted(self.live):
                for b in self.overlapping(a):
                    if b <= a:
                        continue
                    res = self.gain(a, b)
                    if res is None:
                        continue
                    key = (-round(res[0], _GAIN_DIGITS), a, b)
                    if best is None or key < best:
                        best = key
            if best is None or -best[0] <= self.cfg.theta_merge:
                break
            self.apply("greedy", best[1], best[2])

    def absorb_small(self) -> list[int]:
        """Fold undersized subgraphs into an overlapping neighbour; returns those left alone."""
        stuck: set[int] = set()
        while True:
            small = [s for s in sorted(self.live) if self.live[s].size < self.cfg.tau_min and s not in stuck]
            if not small:
                break
            sid = small[0]
            best = None
            for other in self.overlapping(sid):
                res = self.gain(sid, other)
                if res is None:
                    continue
                key = (-round(res[0], _GAIN_DIGITS), other)
                if best is None or key < best:
                    best = key
            if best is None:
                stuck.add(sid)
                continue
            self.apply("absorb", sid, best[1])
        return sorted(s for s in stuck if s in self.live)


def greedy_merge(
    candidates: list[Subgraph],
    cfg: PartitionConfig,
    n_entities: int,
    pool: SegmentPool,
    kg: KnowledgeGraph,
) -> tuple[list[Subgraph], list[MergeStep], list[int]]:
    """Merge overlapping candidates while the best gain exceeds ``theta_merge``.

    Returns (subgraphs, merge log, ids of undersized subgraphs that had no
    overlapping neighbour with spare capacity). Subgraph ids are not compacted.
    """
    cfg = cfg.resolved(n_entities)
    m = _Merger(candidates, cfg, n_entities, pool, kg)
    m.greedy()
    stuck = m.absorb_small()
    return [m.live[s] for s in sorted(m.live)], m.log, stuck


@dataclass
class ColorMap:
    colors: dict[int, frozenset[int]]
    boundary: list[int]
    uncovered: list[int]


def assign_colors(subgraphs: Iterable[Subgraph], kg: KnowledgeGraph) -> ColorMap:
    colors: dict[int, set[int]] = defaultdict(set)
    for sg in subgraphs:
        for e in sg.entities:
            colors[e].add(sg.id)
    frozen = {e: frozenset(c) for e, c in sorted(colors.items())}
    return ColorMap(
        frozen,
        [e for e, c in frozen.items() if len(c) > 1],
        [e for e in range(kg.n_entities) if e not in frozen],
    )


@dataclass
class Partition:
    config: PartitionConfig
    subgraphs: list[Subgraph]
    colors: ColorMap
    report: IgReport
    log: list[MergeStep]
    undersized: list[int]
    n_entities: int

    def subgraph(self, sid: int) -> Subgraph:
        return self.subgraphs[sid]

    def to_json(self, kg: KnowledgeGraph) -> dict:
        return {
            "config": self.config.to_json(),
            "n_entities": self.n_entities,
            "subgraphs": [
                {
                    "id": sg.id,
                    "members": list(sg.members),
                    "entities": sorted(sg.entities),
                    "entity_names": [kg.entity_name(e) for e in sorted(sg.entities)],
                    "triples": sorted(kg.triple_index(tr) for tr in sg.triples),
                    "support": [
                        {"segment": kg.path_names(seg), "count": c} for seg, c in sg.support.items()
                    ],
                    "signature": sg.signature,
                }
                for sg in self.subgraphs
            ],
            "colors": {kg.entity_name(e): sorted(c) for e, c in self.colors.colors.items()},
            "boundary": [kg.entity_name(e) for e in self.colors.boundary],
            "uncovered": [kg.entity_name(e) for e in self.colors.uncovered],
            "undersized": self.undersized,
            "ig_report": self.report.to_json(),
            "merge_log": [asdict(s) for s in self.log],
        }

    @classmethod
    def from_json(cls, obj: dict, kg: KnowledgeGraph) -> "Partition":
        cfg = PartitionConfig(**obj["config"])
        subgraphs = []
        for s in obj["subgraphs"]:
            triples = frozenset(kg.triples[i] for i in s["triples"])
            support = {kg.make_path(x["segment"]).canonical(): x["count"] for x in s["support"]}
            subgraphs.append(Subgraph(
                s["id"],
                frozenset(s["entities"]),
                triples,
                support,
                dict(s["signature"]),
                tuple(s["members"]),
            ))
        rep = obj["ig_report"]
        report = IgReport([IgEntry(**e) for e in rep["subgraphs"]], rep["total"], rep["lam"], rep["n_entities"])
        return cls(
            cfg,
            subgraphs,
            assign_colors(subgraphs, kg),
            report,
            [MergeStep(**m) for m in obj["merge_log"]],
            list(obj["undersized"]),
            obj["n_entities"],
        )


def partition_graph(base: QuestionBase, kg: KnowledgeGraph, cfg: PartitionConfig | None = None) -> Partition:
    """Seed, merge, absorb and color. Final subgraph ids are compacted to 0..k-1."""
    cfg = (cfg or PartitionConfig()).resolved(kg.n_entities)
    pool = SegmentPool.from_base(base)
    candidates = seed_candidates(base, kg, pool, cfg.eta_max)
    merged, log, stuck = greedy_merge(candidates, cfg, kg.n_entities, pool, kg)
    renumber = {sg.id: i for i, sg in enumerate(merged)}
    final = [replace(sg, id=renumber[sg.id]) for sg in merged]
    undersized = [renumber[s] for s in stuck]
    if undersized:
        logger.warning("%d undersized subgraph(s) kept standalone: %s", len(undersized), undersized)
    return Partition(
        cfg,
        final,
        assign_colors(final, kg),
        information_gain(final, cfg, kg.n_entities),
        log,
        undersized,
        kg.n_entities,
    )
