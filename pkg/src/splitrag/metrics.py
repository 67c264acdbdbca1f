"""Answer-quality metrics, evaluation report and search-space accounting."""
from __future__ import annotations

import math
import statistics
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence


def precision_recall(predicted: Iterable[str], gold: Iterable[str]) -> tuple[float, float]:
    pred, g = set(predicted), set(gold)
    hit = len(pred & g)
    p = hit / len(pred) if pred else 0.0
    r = hit / len(g) if g else 0.0
    return p, r


def f1(predicted: Iterable[str], gold: Iterable[str]) -> float:
    p, r = precision_recall(predicted, gold)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def hit(predicted: Iterable[str], gold: Iterable[str]) -> float:
    return float(bool(set(predicted) & set(gold)))


def hit_at_1(ranked: Sequence[str], gold: Iterable[str]) -> float:
    return float(bool(ranked) and ranked[0] in set(gold))


@dataclass
class QuestionEval:
    id: str
    predicted: list[str]
    gold: list[str]
    hit: float
    hit1: float
    f1: float
    activated: int = 0
    touched: int = 0
    covered: bool | None = None
    flags: list[str] = field(default_factory=list)


def evaluate_question(qid: str, ranked: Sequence[str], gold: Iterable[str], **extra) -> QuestionEval:
    gold = sorted(set(gold))
    return QuestionEval(qid, list(ranked), gold, hit(ranked, gold), hit_at_1(ranked, gold), f1(ranked, gold),
                        **extra)


def _mean(xs: Sequence[float]) -> float:
    return sum(xs) / len(xs) if xs else 0.0


@dataclass
class EvalReport:
    questions: list[QuestionEval]

    @property
    def hit(self) -> float:
        return _mean([q.hit for q in self.questions])

    @property
    def hits_at_1(self) -> float:
        return _mean([q.hit1 for q in self.questions])

    @property
    def f1(self) -> float:
        return _mean([q.f1 for q in self.questions])

    def to_json(self) -> dict:
        covered = [q.covered for q in self.questions if q.covered is not None]
        return {
            "n_questions": len(self.questions),
            "hit": self.hit,
            "hits_at_1": self.hits_at_1,
            "f1": self.f1,
            "efficiency": {
                "mean_activated_subgraphs": _mean([q.activated for q in self.questions]),
                "mean_touched_entities": _mean([q.touched for q in self.questions]),
            },
            "g_coverage": _mean([float(c) for c in covered]) if covered else None,
            "questions": [asdict(q) for q in self.questions],
        }


@dataclass
class SearchTrace:
    question_id: str
    touched: int
    n_entities: int
    activated: int
    lookups: int = 0
    empty: bool = False

    @property
    def ratio(self) -> float:
        return self.touched / self.n_entities


def measure_search_space(traces: Sequence[SearchTrace], n_subgraphs: int | None = None,
                         mean_subgraph_size: float | None = None) -> dict:
    """Touched-entity ratio over non-empty traces, plus the (N/k)·log k vs N comparison."""
    if not traces:
        raise ValueError("no traces to measure")
    used = [t for t in traces if not t.empty]
    ratios = [t.ratio for t in used]
    n = traces[0].n_entities
    out = {
        "questions": len(traces),
        "excluded_empty": len(traces) - len(used),
        "mean_ratio": _mean(ratios),
        "min_ratio": min(ratios) if ratios else None,
        "max_ratio": max(ratios) if ratios else None,
        "median_ratio": statistics.median(ratios) if ratios else None,
        "mean_touched": _mean([t.touched for t in used]),
        "mean_activated": _mean([t.activated for t in used]),
        "mean_lookups": _mean([t.lookups for t in used]),
        "whole_graph_scan": n,
    }
    if mean_subgraph_size:
        k = mean_subgraph_size
        m = math.ceil(n / k)
        out["partitioned_cost"] = m * math.log2(max(k, 2.0))
        out["n_subgraphs"] = n_subgraphs
    return out
