"""Typed triple store: vocabularies, adjacency, type and ordered indexes, paths."""
from __future__ import annotations

import json
import logging
from bisect import bisect_left, bisect_right
from collections import defaultdict, deque
from dataclasses import dataclass
from pathlib import Path as FsPath
from typing import Iterable, NamedTuple, Sequence

logger = logging.getLogger(__name__)


class GraphError(ValueError):
    pass


class GraphFormatError(GraphError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        where = ""
        if source is not None:
            where += f"{source}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line
        self.source = source


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


@dataclass(frozen=True, order=True)
class Path:
    """Alternating entity/relation chain.

    ``inverted[j]`` is True when hop ``j`` walks the stored triple from tail to
    head, i.e. the stored fact is ``(entities[j+1], relations[j], entities[j])``.
    """

    entities: tuple[int, ...]
    relations: tuple[int, ...] = ()
    inverted: tuple[bool, ...] = ()

    def __post_init__(self) -> None:
        if len(self.entities) != len(self.relations) + 1 or len(self.inverted) != len(self.relations):
            raise GraphError("malformed path: entity/relation counts disagree")

    @property
    def hops(self) -> int:
        return len(self.relations)

    def steps(self) -> list[tuple[int, int, int, bool]]:
        return [
            (self.entities[j], self.relations[j], self.entities[j + 1], self.inverted[j])
            for j in range(self.hops)
        ]

    def triples(self) -> tuple[Triple, ...]:
        """Stored (canonical direction) triple of every hop, in path order."""
        out = []
        for src, rel, dst, inv in self.steps():
            out.append(Triple(dst, rel, src) if inv else Triple(src, rel, dst))
        return tuple(out)

    def slice(self, start: int, stop: int) -> "Path":
        return Path(
            self.entities[start : stop + 1],
            self.relations[start:stop],
            self.inverted[start:stop],
        )

    def reversed(self) -> "Path":
        return Path(
            self.entities[::-1],
            self.relations[::-1],
            tuple(not inv for inv in self.inverted[::-1]),
        )

    def canonical(self) -> "Path":
        """Orientation-free representative (a path and its reverse share it)."""
        return min(self, self.reversed())

    @property
    def start(self) -> int:
        return self.entities[0]

    @property
    def end(self) -> int:
        return self.entities[-1]


# A PathSegment is a Path of one or two hops.
PathSegment = Path


def split_into_segments(p: Path) -> list[PathSegment]:
    """Greedy left-to-right split into 2-hop pieces; the last one may be 1 hop.

    Consecutive segments share their boundary entity.
    """
    if p.hops < 1:
        raise GraphError("cannot segment a zero-hop path")
    return [p.slice(i, min(i + 2, p.hops)) for i in range(0, p.hops, 2)]


class KnowledgeGraph:
    """Immutable typed triple store.

    Entity and relation handles are dense ints assigned in sorted-name order, so
    the same files always produce the same ids.
    """

    def __init__(
        self,
        entity_types: dict[str, str],
        triples: Iterable[tuple[str, str, str]],
        functional_relations: Iterable[str] = (),
        negation_pairs: Iterable[Sequence[str]] = (),
        reflexive_relations: Iterable[str] = (),
        warnings: Iterable[str] = (),
    ):
        triples = list(triples)
        functional_relations = list(functional_relations)
        negation_pairs = [tuple(p) for p in negation_pairs]
        reflexive_relations = list(reflexive_relations)

        self.entity_names: tuple[str, ...] = tuple(sorted(entity_types))
        self._entity_ids = {name: i for i, name in enumerate(self.entity_names)}
        self.entity_types: tuple[str, ...] = tuple(entity_types[n] for n in self.entity_names)

        rel_names = {r for _, r, _ in triples}
        rel_names.update(functional_relations, reflexive_relations)
        for pair in negation_pairs:
            if len(pair) != 2:
                raise GraphError(f"negation pair must have two relations: {list(pair)}")
            rel_names.update(pair)
        self.relation_names: tuple[str, ...] = tuple(sorted(rel_names))
        self._relation_ids = {name: i for i, name in enumerate(self.relation_names)}

        self.functional_relations = frozenset(self._relation_ids[r] for r in functional_relations)
        self.reflexive_relations = frozenset(self._relation_ids[r] for r in reflexive_relations)
        self.negation_pairs = frozenset(
            frozenset((self._relation_ids[a], self._relation_ids[b])) for a, b in negation_pairs
        )

        encoded = set()
        for h, r, t in triples:
            for name in (h, t):
                if name not in self._entity_ids:
                    raise GraphError(f"unknown entity type: entity {name!r} is not typed in the schema")
            tr = Triple(self._entity_ids[h], self._relation_ids[r], self._entity_ids[t])
            if tr.head == tr.tail and tr.relation not in self.reflexive_relations:
                raise GraphError(f"self-loop ({h}, {r}, {t}) on a relation not declared reflexive")
            encoded.add(tr)
        # sorted by (head, relation, tail): doubles as the ordered index
        self.triples: tuple[Triple, ...] = tuple(sorted(encoded))
        self._triple_set = frozenset(self.triples)

        out_adj: list[list[tuple[int, int]]] = [[] for _ in self.entity_names]
        in_adj: list[list[tuple[int, int]]] = [[] for _ in self.entity_names]
        for tr in self.triples:
            out_adj[tr.head].append((tr.relation, tr.tail))
            in_adj[tr.tail].append((tr.relation, tr.head))
        self.out_adj = tuple(tuple(a) for a in out_adj)
        self.in_adj = tuple(tuple(sorted(a)) for a in in_adj)

        type_index: dict[str, list[int]] = defaultdict(list)
        for i, tname in enumerate(self.entity_types):
            type_index[tname].append(i)
        self.type_index = {k: tuple(v) for k, v in sorted(type_index.items())}
        self.warnings = tuple(warnings)

    # vocabulary -------------------------------------------------------------

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_relations(self) -> int:
        return len(self.relation_names)

    def entity_id(self, name: str) -> int:
        try:
            return self._entity_ids[name]
        except KeyError:
            raise GraphError(f"unknown entity {name!r}") from None

    def relation_id(self, name: str) -> int:
        try:
            return self._relation_ids[name]
        except KeyError:
            raise GraphError(f"unknown relation {name!r}") from None

    def has_entity(self, name: str) -> bool:
        return name in self._entity_ids

    def entity_name(self, e: int) -> str:
        return self.entity_names[e]

    def entity_type(self, e: int) -> str:
        return self.entity_types[e]

    def relation_name(self, r: int) -> str:
        return self.relation_names[r]

    def triple_names(self, tr: Triple) -> tuple[str, str, str]:
        return (self.entity_names[tr.head], self.relation_names[tr.relation], self.entity_names[tr.tail])

    def triple_index(self, tr: Triple) -> int:
        i = bisect_left(self.triples, tr)
        if i == len(self.triples) or self.triples[i] != tr:
            raise GraphError(f"triple {tr} not in graph")
        return i

    # lookups ----------------------------------------------------------------

    def has_triple(self, tr: Triple) -> bool:
        return tr in self._triple_set

    def tails(self, head: int, relation: int) -> list[int]:
        """Ordered-index range scan over (head, relation)."""
        lo = bisect_left(self.triples, (head, relation, -1))
        hi = bisect_right(self.triples, (head, relation, self.n_entities))
        return [tr.tail for tr in self.triples[lo:hi]]

    def heads(self, tail: int, relation: int) -> list[int]:
        return [h for r, h in self.in_adj[tail] if r == relation]

    def out_degree(self, e: int) -> int:
        return len(self.out_adj[e])

    def in_degree(self, e: int) -> int:
        return len(self.in_adj[e])

    def incident(self, e: int) -> list[tuple[int, int, bool]]:
        """(relation, other end, inverted) for every edge touching ``e``."""
        out = [(r, t, False) for r, t in self.out_adj[e]]
        out += [(r, h, True) for r, h in self.in_adj[e]]
        return out

    def neighbors(self, e: int, depth: int = 1) -> set[int]:
        if not 0 <= e < self.n_entities:
            raise GraphError(f"unknown entity id {e}")
        if depth not in (1, 2):
            raise GraphError("depth must be 1 or 2")
        seen = {e}
        frontier = deque([(e, 0)])
        while frontier:
            node, d = frontier.popleft()
            if d == depth:
                continue
            for _, other, _ in self.incident(node):
                if other not in seen:
                    seen.add(other)
                    frontier.append((other, d + 1))
        seen.discard(e)
        return seen

    # paths ------------------------------------------------------------------

    def make_path(self, seq: Sequence[str]) -> Path:
        """Build a Path from ``[e, r, e, r, e, ...]`` names.

        Each hop may follow the stored direction or its inverse; the direction
        actually found is recorded.
        """
        if len(seq) % 2 == 0 or not seq:
            raise GraphError(f"path must alternate entity/relation and end on an entity: {list(seq)}")
        ents = tuple(self.entity_id(n) for n in seq[0::2])
        rels = tuple(self.relation_id(n) for n in seq[1::2])
        inverted = []
        for j, r in enumerate(rels):
            a, b = ents[j], ents[j + 1]
            if Triple(a, r, b) in self._triple_set:
                inverted.append(False)
            elif Triple(b, r, a) in self._triple_set:
                inverted.append(True)
            else:
                raise GraphError(
                    f"invalid path: no triple links {seq[2 * j]!r} and {seq[2 * j + 2]!r} via {seq[2 * j + 1]!r}"
                )
        return Path(ents, rels, tuple(inverted))

    def validate_path(self, p: Path) -> None:
        for e in p.entities:
            if not 0 <= e < self.n_entities:
                raise GraphError(f"invalid path: unknown entity id {e}")
        for tr in p.triples():
            if tr not in self._triple_set:
                raise GraphError(f"invalid path: triple {self._safe_names(tr)} not in graph")

    def _safe_names(self, tr: Triple) -> tuple:
        try:
            return self.triple_names(tr)
        except IndexError:
            return tuple(tr)

    def path_names(self, p: Path) -> list[str]:
        out = [self.entity_names[p.entities[0]]]
        for _, rel, dst, _ in p.steps():
            out += [self.relation_names[rel], self.entity_names[dst]]
        return out

    def pattern_of(self, p: Path) -> "Pattern":
        """Type-level shape of a path: entity types plus (relation, inverted) per hop."""
        return Pattern(
            tuple(self.entity_types[e] for e in p.entities),
            tuple((self.relation_names[r], inv) for r, inv in zip(p.relations, p.inverted)),
        )

    def stats(self) -> dict[str, int]:
        return {"entities": self.n_entities, "relations": self.n_relations, "triples": len(self.triples)}


@dataclass(frozen=True, order=True)
class Pattern:
    """Entity types and (relation name, inverted) steps of a path, no instances."""

    types: tuple[str, ...]
    steps: tuple[tuple[str, bool], ...]

    @property
    def hops(self) -> int:
        return len(self.steps)

    def reversed(self) -> "Pattern":
        return Pattern(self.types[::-1], tuple((r, not inv) for r, inv in self.steps[::-1]))

    def canonical(self) -> "Pattern":
        return min(self, self.reversed())

    def render(self) -> str:
        parts = [self.types[0]]
        for (rel, inv), t in zip(self.steps, self.types[1:]):
            parts.append(f"<-[{rel}]-" if inv else f"-[{rel}]->")
            parts.append(t)
        return "".join(parts)

    def to_json(self) -> dict:
        return {"types": list(self.types), "steps": [[r, inv] for r, inv in self.steps]}

    @classmethod
    def from_json(cls, obj: dict) -> "Pattern":
        return cls(tuple(obj["types"]), tuple((r, bool(inv)) for r, inv in obj["steps"]))


def load_graph(triples_file: str | FsPath, schema_file: str | FsPath) -> KnowledgeGraph:
    """Read a tab-separated triples file plus a JSON schema into a KnowledgeGraph."""
    triples_file = FsPath(triples_file)
    schema_file = FsPath(schema_file)
    try:
        schema = json.loads(schema_file.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"schema is not valid JSON ({exc.msg})", exc.lineno, str(schema_file)) from exc
    if not isinstance(schema, dict) or not isinstance(schema.get("entity_types"), dict):
        raise GraphFormatError("schema must be an object with an 'entity_types' mapping", source=str(schema_file))

    rows: list[tuple[str, str, str]] = []
    seen: set[tuple[str, str, str]] = set()
    warnings: list[str] = []
    with triples_file.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.rstrip("\r\n")
            if not stripped.strip() or stripped.lstrip().startswith("#"):
                continue
            parts = stripped.split("\t")
            if len(parts) != 3 or not all(p.strip() for p in parts):
                raise GraphFormatError("expected head<TAB>relation<TAB>tail", lineno, str(triples_file))
            h, r, t = (p.strip() for p in parts)
            if h not in schema["entity_types"] or t not in schema["entity_types"]:
                missing = h if h not in schema["entity_types"] else t
                raise GraphFormatError(f"unknown entity type for {missing!r}", lineno, str(triples_file))
            if (h, r, t) in seen:
                msg = f"{triples_file}:{lineno}: duplicate triple ({h}, {r}, {t}) ignored"
                logger.warning(msg)
                warnings.append(msg)
                continue
            seen.add((h, r, t))
            rows.append((h, r, t))
    if not rows:
        raise GraphError("empty graph")

    kg = KnowledgeGraph(
        schema["entity_types"],
        rows,
        functional_relations=schema.get("functional_relations", []),
        negation_pairs=schema.get("negation_pairs", []),
        reflexive_relations=schema.get("reflexive_relations", []),
        warnings=warnings,
    )
    logger.info("loaded graph: %(entities)d entities, %(relations)d relations, %(triples)d triples", kg.stats())
    return kg


class GraphView:
    """Adjacency over a subset of a graph's triples (one subgraph, or the whole graph)."""

    def __init__(self, kg: KnowledgeGraph, triples: Iterable[Triple]):
        self.kg = kg
        self.triples = frozenset(triples)
        adj: dict[tuple[int, int, bool], list[int]] = defaultdict(list)
        step_types: set[tuple[str, str, bool, str]] = set()
        ents: set[int] = set()
        for tr in self.triples:
            adj[(tr.head, tr.relation, False)].append(tr.tail)
            adj[(tr.tail, tr.relation, True)].append(tr.head)
            ents.update((tr.head, tr.tail))
            rel = kg.relation_name(tr.relation)
            th, tt = kg.entity_type(tr.head), kg.entity_type(tr.tail)
            step_types.add((th, rel, False, tt))
            step_types.add((tt, rel, True, th))
        self._adj = {k: tuple(sorted(v)) for k, v in adj.items()}
        inc: dict[int, list[tuple[int, int, bool]]] = defaultdict(list)
        for (src, rel, inv), others in self._adj.items():
            inc[src].extend((rel, o, inv) for o in others)
        self._incident = {e: sorted(v) for e, v in inc.items()}
        self.entities = frozenset(ents)
        self.types = frozenset(kg.entity_type(e) for e in ents)
        self.step_types = frozenset(step_types)

    def step(self, e: int, relation: int, inverted: bool) -> tuple[int, ...]:
        return self._adj.get((e, relation, inverted), ())

    def incident(self, e: int) -> list[tuple[int, int, bool]]:
        return list(self._incident.get(e, ()))

    def entities_of_type(self, type_label: str) -> list[int]:
        return sorted(e for e in self.entities if self.kg.entity_type(e) == type_label)

    def walk(self, starts: Iterable[int], pattern: Pattern, counter: list[int] | None = None) -> list[Path]:
        """Simple paths instantiating ``pattern`` from any of ``starts`` inside the view.

        ``counter[0]`` is incremented once per adjacency lookup when given.
        """
        try:
            rels = [(self.kg.relation_id(r), inv) for r, inv in pattern.steps]
        except GraphError:
            return []
        out: list[Path] = []
        for s in sorted(set(starts)):
            if s not in self.entities or self.kg.entity_type(s) != pattern.types[0]:
                continue
            stack = [((s,), (), ())]
            while stack:
                ents, rs, invs = stack.pop()
                j = len(rs)
                if j == len(rels):
                    out.append(Path(ents, rs, invs))
                    continue
                rel, inv = rels[j]
                if counter is not None:
                    counter[0] += 1
                for nxt in reversed(self.step(ents[-1], rel, inv)):
                    if nxt in ents or self.kg.entity_type(nxt) != pattern.types[j + 1]:
                        continue
                    stack.append((ents + (nxt,), rs + (rel,), invs + (inv,)))
        return sorted(out)

    def instantiable_prefix(self, start: int, pattern: Pattern) -> int:
        """Number of leading pattern steps that can be followed from ``start``."""
        if start not in self.entities or self.kg.entity_type(start) != pattern.types[0]:
            return 0
        frontier = {start}
        done = 0
        for j, (rname, inv) in enumerate(pattern.steps):
            try:
                rel = self.kg.relation_id(rname)
            except GraphError:
                break
            nxt = {
                o
                for x in frontier
                for o in self.step(x, rel, inv)
                if o != start and self.kg.entity_type(o) == pattern.types[j + 1]
            }
            if not nxt:
                break
            frontier = nxt
            done += 1
        return done

    def type_level_steps(self, pattern: Pattern) -> int:
        """Number of pattern steps whose (type, relation, type) shape occurs in the view."""
        return sum(
            (pattern.types[j], r, inv, pattern.types[j + 1]) in self.step_types
            for j, (r, inv) in enumerate(pattern.steps)
        )
