"""Question preprocessing: semantic / entity-type / path contexts and the training base."""
from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path as FsPath
from typing import Iterable, Sequence

from .kg import GraphError, KnowledgeGraph, Path, Pattern, split_into_segments

logger = logging.getLogger(__name__)

_WORD = re.compile(r"[A-Za-z0-9]+(?:['_-][A-Za-z0-9]+)*")


class QuestionError(ValueError):
    pass


def default_stopwords() -> frozenset[str]:
    text = resources.files("splitrag.data").joinpath("stopwords.txt").read_text(encoding="utf-8")
    return load_stopword_lines(text.splitlines())


def load_stopwords(path: str | FsPath) -> frozenset[str]:
    return load_stopword_lines(FsPath(path).read_text(encoding="utf-8").splitlines())


def load_stopword_lines(lines: Iterable[str]) -> frozenset[str]:
    return frozenset(w.strip().lower() for w in lines if w.strip() and not w.lstrip().startswith("#"))


def default_type_synonyms() -> dict[str, str]:
    text = resources.files("splitrag.data").joinpath("type_synonyms.json").read_text(encoding="utf-8")
    return json.loads(text)


@dataclass(frozen=True)
class Contexts:
    semantic: tuple[str, ...]
    # token-aligned with ``semantic``
    entity_type: tuple[str, ...]
    entity_positions: tuple[int, ...]
    entities: tuple[int, ...]

    @property
    def semantic_text(self) -> str:
        return " ".join(self.semantic)

    @property
    def entity_type_tokens(self) -> tuple[str, ...]:
        """Entity-type context as used for matching.

        A type word directly followed by an entity of the same type collapses
        into one token ("film [X]" -> "movie").
        """
        marks = set(self.entity_positions)
        out = []
        for i, tok in enumerate(self.entity_type):
            if i not in marks and i + 1 in marks and self.entity_type[i + 1] == tok:
                continue
            out.append(tok)
        return tuple(out)

    @property
    def entity_type_text(self) -> str:
        return " ".join(self.entity_type_tokens)


def _type_word(token: str, type_labels: set[str], synonyms: dict[str, str]) -> str:
    if token in synonyms:
        return synonyms[token]
    if token in type_labels:
        return token
    if token.endswith("s") and token[:-1] in type_labels:
        return token[:-1]
    return token


def preprocess(
    raw: str,
    entity_links: Sequence[tuple[tuple[int, int], int | str]],
    kg: KnowledgeGraph,
    stopwords: Iterable[str],
    type_synonyms: dict[str, str] | None = None,
) -> Contexts:
    """Build the semantic context Q_s and the entity-type context Q_e.

    Stopwords are dropped, linked spans become ``[Entity Name]`` tokens in Q_s
    and their type label in Q_e. Plain words naming an entity type (``films``,
    ``directors``) are normalized to that type in Q_e as well.
    """
    stop = {w.lower() for w in stopwords}
    synonyms = default_type_synonyms() if type_synonyms is None else type_synonyms
    type_labels = set(kg.type_index)

    links = []
    for span, ent in entity_links:
        start, end = span
        if not (0 <= start < end <= len(raw)):
            raise QuestionError(f"entity span {span} outside question of length {len(raw)}")
        try:
            eid = ent if isinstance(ent, int) else kg.entity_id(ent)
        except GraphError:
            raise QuestionError(f"entity {ent!r} not in graph") from None
        if not 0 <= eid < kg.n_entities:
            raise QuestionError(f"entity id {eid} not in graph")
        links.append((start, end, eid))
    links.sort()
    for (s1, e1, _), (s2, _, _) in zip(links, links[1:]):
        if s2 < e1:
            raise QuestionError(f"overlapping entity spans at {s1}-{e1} and {s2}")

    semantic: list[str] = []
    etype: list[str] = []
    positions: list[int] = []
    entities: list[int] = []

    def words(chunk: str) -> None:
        for m in _WORD.finditer(chunk):
            tok = m.group(0).lower()
            if tok in stop:
                continue
            semantic.append(tok)
            etype.append(_type_word(tok, type_labels, synonyms))

    cursor = 0
    for start, end, eid in links:
        words(raw[cursor:start])
        positions.append(len(semantic))
        entities.append(eid)
        semantic.append(f"[{kg.entity_name(eid)}]")
        etype.append(kg.entity_type(eid))
        cursor = end
    words(raw[cursor:])
    return Contexts(tuple(semantic), tuple(etype), tuple(positions), tuple(entities))


@dataclass(frozen=True)
class PatternStep:
    """One step of a stored decomposition: a segment template, its agent and subgraphs.

    ``template.types[0]`` is the anchor slot. ``anchor`` is "entity" when the
    slot is bound to a linked entity of the question, "chain" when it takes
    the previous step's output.
    """

    template: Pattern
    anchor: str
    agent: int | None
    subgraphs: tuple[int, ...]

    def to_json(self) -> dict:
        return {
            "template": self.template.to_json(),
            "anchor": self.anchor,
            "agent": self.agent,
            "subgraphs": list(self.subgraphs),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PatternStep":
        return cls(Pattern.from_json(obj["template"]), obj["anchor"], obj["agent"], tuple(obj["subgraphs"]))


@dataclass(frozen=True)
class QuestionRecord:
    id: str
    text: str
    contexts: Contexts
    paths: tuple[Path, ...] = ()
    qtype: str | None = None
    answers: frozenset[str] = frozenset()
    pattern: tuple[PatternStep, ...] | None = None

    @property
    def semantic(self) -> tuple[str, ...]:
        return self.contexts.semantic

    @property
    def entity_type_tokens(self) -> tuple[str, ...]:
        return self.contexts.entity_type_tokens

    @property
    def entities(self) -> tuple[int, ...]:
        return self.contexts.entities

    @property
    def path(self) -> Path | None:
        return self.paths[0] if self.paths else None


def cluster_key(rec: QuestionRecord, kg: KnowledgeGraph) -> tuple[str | None, tuple[str, ...]]:
    """Question-type cluster: (qtype label, sorted entity-type multiset)."""
    return rec.qtype, tuple(sorted(kg.entity_type(e) for e in rec.entities))


def orient_path(path: Path, linked: Sequence[int]) -> Path:
    """Reverse a path so that it starts at a linked entity when only its end is one."""
    if linked and path.start not in linked and path.end in linked:
        return path.reversed()
    return path


def attach_path(rec: QuestionRecord, path: Path | Sequence[Path], kg: KnowledgeGraph) -> QuestionRecord:
    """Return ``rec`` with its path context replaced (last write wins)."""
    paths = (path,) if isinstance(path, Path) else tuple(path)
    oriented = []
    for p in paths:
        try:
            kg.validate_path(p)
        except GraphError as exc:
            raise QuestionError(str(exc)) from None
        if p.hops == 0:
            raise QuestionError("path context needs at least one hop")
        p = orient_path(p, rec.entities)
        if rec.entities and p.start not in rec.entities and p.end not in rec.entities:
            logger.warning("question %s: path endpoints carry no linked entity", rec.id)
        oriented.append(p)
    return replace(rec, paths=tuple(oriented))


@dataclass(frozen=True)
class TermVector:
    weights: dict[str, float] = field(default_factory=dict)

    @property
    def is_zero(self) -> bool:
        return not self.weights

    def cosine(self, other: "TermVector") -> float:
        a, b = (self.weights, other.weights) if len(self.weights) <= len(other.weights) else (other.weights, self.weights)
        return sum(w * b.get(t, 0.0) for t, w in a.items())


class QuestionBase:
    """Training questions plus a TF-IDF index over entity-type contexts and a segment index."""

    def __init__(self, records: Iterable[QuestionRecord] = ()):
        self.records: list[QuestionRecord] = []
        self._by_id: dict[str, int] = {}
        self.segment_index: dict[Path, set[str]] = {}
        self._idf: dict[str, float] | None = None
        self._vectors: dict[str, TermVector] = {}
        for rec in records:
            self.add(rec)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def finalized(self) -> bool:
        return self._idf is not None

    def get(self, rec_id: str) -> QuestionRecord:
        return self.records[self._by_id[rec_id]]

    def index_of(self, rec_id: str) -> int:
        return self._by_id[rec_id]

    def add(self, rec: QuestionRecord) -> None:
        if self.finalized:
            raise QuestionError("question base is finalized")
        if rec.id in self._by_id:
            raise QuestionError(f"duplicate question id {rec.id!r}")
        self._by_id[rec.id] = len(self.records)
        self.records.append(rec)
        self._index_segments(rec)

    def _index_segments(self, rec: QuestionRecord) -> None:
        for p in rec.paths:
            for seg in split_into_segments(p):
                self.segment_index.setdefault(seg.canonical(), set()).add(rec.id)

    def _unindex_segments(self, rec: QuestionRecord) -> None:
        for p in rec.paths:
            for seg in split_into_segments(p):
                ids = self.segment_index.get(seg.canonical())
                if ids is not None:
                    ids.discard(rec.id)
                    if not ids:
                        del self.segment_index[seg.canonical()]

    def attach_path(self, rec_id: str, path: Path | Sequence[Path], kg: KnowledgeGraph) -> QuestionRecord:
        i = self._by_id[rec_id]
        old = self.records[i]
        new = attach_path(old, path, kg)
        self._unindex_segments(old)
        self.records[i] = new
        self._index_segments(new)
        return new

    def set_pattern(self, rec_id: str, pattern: Sequence[PatternStep] | None) -> None:
        # patterns are recorded after allocation, so this is allowed post-finalize
        i = self._by_id[rec_id]
        self.records[i] = replace(self.records[i], pattern=None if pattern is None else tuple(pattern))

    def finalize(self) -> None:
        docs = [r.entity_type_tokens for r in self.records if r.entity_type_tokens]
        df = Counter()
        for tokens in docs:
            df.update(set(tokens))
        n = len(docs)
        # smoothed idf: ln((1 + n) / (1 + df)) + 1
        self._idf = {t: math.log((1 + n) / (1 + d)) + 1.0 for t, d in sorted(df.items())}
        self._vectors = {r.id: self.vectorize(r.entity_type_tokens) for r in self.records if r.entity_type_tokens}

    def vectorize(self, tokens: Sequence[str]) -> TermVector:
        if self._idf is None:
            raise QuestionError("question base must be finalized before vectorizing")
        if not tokens:
            logger.debug("empty entity-type context vectorized to the zero vector")
            return TermVector()
        tf = Counter(t for t in tokens if t in self._idf)
        raw = {t: c * self._idf[t] for t, c in sorted(tf.items())}
        norm = math.sqrt(sum(w * w for w in raw.values()))
        if norm == 0.0:
            return TermVector()
        return TermVector({t: w / norm for t, w in raw.items()})

    def vector(self, rec_id: str) -> TermVector | None:
        return self._vectors.get(rec_id)

    @property
    def indexed_ids(self) -> list[str]:
        return [r.id for r in self.records if r.id in self._vectors]

    def clusters(self, kg: KnowledgeGraph) -> dict[tuple, list[str]]:
        out: dict[tuple, list[str]] = {}
        for r in self.records:
            out.setdefault(cluster_key(r, kg), []).append(r.id)
        return out


def record_from_json(
    obj: dict,
    kg: KnowledgeGraph,
    stopwords: Iterable[str],
    type_synonyms: dict[str, str] | None = None,
) -> QuestionRecord:
    """Parse one QA JSON object; raises QuestionError/GraphError on bad content."""
    text = obj["question"]
    links = []
    for ent in obj.get("entities", []):
        start, end = ent["span"]
        links.append(((int(start), int(end)), ent["name"]))
    ctx = preprocess(text, links, kg, stopwords, type_synonyms)
    rec = QuestionRecord(
        id=str(obj["id"]),
        text=text,
        contexts=ctx,
        qtype=obj.get("qtype"),
        answers=frozenset(obj.get("answers", [])),
    )
    raw_path = obj.get("path")
    if raw_path:
        seqs = raw_path if isinstance(raw_path[0], list) else [raw_path]
        rec = attach_path(rec, [kg.make_path(s) for s in seqs], kg)
    return rec


def read_qa_file(
    path: str | FsPath,
    kg: KnowledgeGraph,
    stopwords: Iterable[str] | None = None,
    type_synonyms: dict[str, str] | None = None,
) -> list[QuestionRecord]:
    """Load a JSON Lines QA file. Lines naming unknown entities are skipped with a warning."""
    path = FsPath(path)
    stop = default_stopwords() if stopwords is None else frozenset(stopwords)
    out = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise QuestionError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            try:
                out.append(record_from_json(obj, kg, stop, type_synonyms))
            except (GraphError, QuestionError) as exc:
                logger.warning("%s:%d: question skipped: %s", path, lineno, exc)
            except (KeyError, TypeError, ValueError) as exc:
                raise QuestionError(f"{path}:{lineno}: malformed question record ({exc})") from exc
    return out
