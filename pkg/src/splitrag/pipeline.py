"""End-to-end orchestration: in-process system plus staged, hash-checked artifacts."""
from __future__ import annotations

import gzip
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path as FsPath
from typing import Sequence

from .allocation import Allocation, allocate_partition, record_patterns
from .config import STAGES, RunConfig
from .datasets import Dataset, load_dataset
from .fusion import FusionResult, fuse
from .gateway import Gateway
from .kg import GraphView, KnowledgeGraph
from .metrics import EvalReport, QuestionEval, SearchTrace, evaluate_question, measure_search_space
from .partition import Partition, partition_graph
from .questions import PatternStep, QuestionBase, QuestionRecord
from .retrieval import RetrievalResult, Retriever, touched_entities
from .routing import RetrievalPlan, Router

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_MISSING, EXIT_MISMATCH = 0, 2, 3
ARTIFACTS = {
    "partition": "partition",
    "allocate": "allocation",
    "route": "plans",
    "answer": "answers",
    "eval": "eval_report",
}
UPSTREAM = {"allocate": "partition", "route": "allocate", "answer": "route", "eval": "answer"}


class StageError(RuntimeError):
    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


@dataclass
class System:
    kg: KnowledgeGraph
    base: QuestionBase
    partition: Partition
    allocation: Allocation
    router: Router
    retriever: Retriever

    @property
    def views(self) -> list[GraphView]:
        return self.router.views


def build_system(kg: KnowledgeGraph, base: QuestionBase, cfg: RunConfig | None = None,
                 gateway: Gateway | None = None, partition: Partition | None = None,
                 allocation: Allocation | None = None) -> System:
    cfg = cfg or RunConfig()
    if not base.finalized:
        base.finalize()
    if partition is None:
        partition = partition_graph(base, kg, cfg.partition)
    if allocation is None:
        allocation, _ = allocate_partition(base, partition, cfg.allocation.n_max, cfg.allocation.theta_coh)
    record_patterns(base, kg, partition, allocation)
    router = Router(kg, base, partition, allocation, cfg.router)
    retriever = Retriever(kg, router.views, gateway, cfg.router.theta_match, cfg.answer.workers)
    return System(kg, base, partition, allocation, router, retriever)


@dataclass
class Answered:
    record: QuestionRecord
    plan: RetrievalPlan
    results: list[RetrievalResult]
    fusion: FusionResult
    touched: int
    covered: bool | None
    elapsed: float = 0.0
    n_entities: int = 0

    @property
    def answers(self) -> list[str]:
        return self.fusion.answers

    def trace(self) -> SearchTrace:
        return SearchTrace(self.record.id, self.touched, self.n_entities, len(self.plan.activated_subgraphs()),
                           sum(r.lookups for r in self.results), empty=not self.plan.assignments)


def gold_covered(rec: QuestionRecord, plan: RetrievalPlan, views: Sequence[GraphView]) -> bool | None:
    """Every gold-path triple lies in some activated subgraph (None without a gold path)."""
    if not rec.paths:
        return None
    active = set()
    for sid in plan.activated_subgraphs():
        active |= views[sid].triples
    return all(set(p.triples()) <= active for p in rec.paths)


def execute_plan(system: System, rec: QuestionRecord, plan: RetrievalPlan, gateway: Gateway | None = None,
                 detect: bool = True, exact_limit: int = 20, parallel: bool = True) -> Answered:
    t0 = time.perf_counter()
    results = system.retriever.run_plan(plan, parallel=parallel)
    fusion = fuse(results, plan, rec.text, system.kg, gateway, detect, exact_limit)
    return Answered(rec, plan, results, fusion, touched_entities(plan, system.views),
                    gold_covered(rec, plan, system.views), time.perf_counter() - t0, system.kg.n_entities)


def answer_question(system: System, rec: QuestionRecord, gateway: Gateway | None = None, detect: bool = True,
                    exact_limit: int = 20, parallel: bool = True) -> Answered:
    return execute_plan(system, rec, system.router.route(rec), gateway, detect, exact_limit, parallel)


def build_report(answered: Sequence[Answered]) -> EvalReport:
    rows: list[QuestionEval] = []
    for a in answered:
        rows.append(evaluate_question(
            a.record.id, a.answers, a.record.answers,
            activated=len(a.plan.activated_subgraphs()), touched=a.touched, covered=a.covered,
            flags=sorted(set(a.fusion.flags) | ({"unroutable"} if a.plan.unroutable else set())),
        ))
    return EvalReport(rows)


def evaluate(system: System, records: Sequence[QuestionRecord], gateway: Gateway | None = None,
             detect: bool = True, exact_limit: int = 20) -> tuple[EvalReport, list[Answered]]:
    answered = [answer_question(system, r, gateway, detect, exact_limit) for r in records]
    return build_report(answered), answered


# staged artifacts -----------------------------------------------------------


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def dataset_hash(ds: Dataset) -> str:
    h = hashlib.sha256()
    for f in ds.files():
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


class ArtifactStore:
    def __init__(self, root: str | FsPath, compact: bool = False):
        self.root = FsPath(root)
        self.compact = compact

    def path_for(self, stage: str) -> FsPath | None:
        for suffix in (".json", ".json.gz"):
            p = self.root / (ARTIFACTS[stage] + suffix)
            if p.exists():
                return p
        return None

    def write(self, stage: str, envelope: dict) -> FsPath:
        self.root.mkdir(parents=True, exist_ok=True)
        data = dump_json(envelope).encode("utf-8")
        name = ARTIFACTS[stage] + (".json.gz" if self.compact else ".json")
        for stale in (ARTIFACTS[stage] + ".json", ARTIFACTS[stage] + ".json.gz"):
            if stale != name and (self.root / stale).exists():
                (self.root / stale).unlink()
        path = self.root / name
        if self.compact:
            # mtime=0 keeps the container byte-stable
            path.write_bytes(gzip.compress(data, mtime=0))
        else:
            path.write_bytes(data)
        return path

    def raw(self, stage: str) -> bytes:
        p = self.path_for(stage)
        if p is None:
            raise StageError(f"missing {stage} artifact in {self.root}; run `splitrag {stage}` first", EXIT_MISSING)
        data = p.read_bytes()
        return gzip.decompress(data) if p.suffix == ".gz" else data

    def read(self, stage: str, cfg: RunConfig, data_hash: str) -> tuple[dict, str]:
        data = self.raw(stage)
        env = json.loads(data)
        if env.get("config_hash") != cfg.stage_hash(stage):
            raise StageError(f"{stage} artifact was built with a different configuration", EXIT_MISMATCH)
        if env.get("dataset_hash") != data_hash:
            raise StageError(f"{stage} artifact was built from a different dataset", EXIT_MISMATCH)
        up = UPSTREAM.get(stage)
        if up is not None and self.path_for(up) is not None and env["upstream"]["sha256"] != _sha(self.raw(up)):
            raise StageError(f"{up} artifact changed after {stage} was built", EXIT_MISMATCH)
        return env["payload"], _sha(data)


class Pipeline:
    """Runs one stage at a time; every stage reads the dataset plus earlier artifacts."""

    def __init__(self, data_dir: str | FsPath, out_dir: str | FsPath, cfg: RunConfig | None = None,
                 compact: bool = False):
        self.cfg = cfg or RunConfig()
        self.store = ArtifactStore(out_dir, compact)
        self.ds = load_dataset(data_dir, self.cfg.stopwords)
        self.data_hash = dataset_hash(self.ds)
        self.timings: dict[str, float] = {}

    @property
    def kg(self) -> KnowledgeGraph:
        return self.ds.kg

    def _emit(self, stage: str, payload: dict, upstream_sha: str | None) -> FsPath:
        env = {
            "stage": stage,
            "config_hash": self.cfg.stage_hash(stage),
            "dataset_hash": self.data_hash,
            "upstream": {"stage": UPSTREAM.get(stage), "sha256": upstream_sha},
            "payload": payload,
        }
        return self.store.write(stage, env)

    def _partition(self) -> tuple[Partition, str]:
        payload, sha = self.store.read("partition", self.cfg, self.data_hash)
        return Partition.from_json(payload, self.kg), sha

    def _allocation(self) -> tuple[Partition, Allocation, str]:
        part, _ = self._partition()
        payload, sha = self.store.read("allocate", self.cfg, self.data_hash)
        alloc = Allocation.from_json(payload["allocation"])
        for qid, steps in payload["patterns"].items():
            self.ds.base.set_pattern(qid, [PatternStep.from_json(s) for s in steps])
        return part, alloc, sha

    def _system(self, part: Partition, alloc: Allocation, gateway: Gateway | None = None) -> System:
        router = Router(self.kg, self.ds.base, part, alloc, self.cfg.router)
        retriever = Retriever(self.kg, router.views, gateway, self.cfg.router.theta_match, self.cfg.answer.workers)
        return System(self.kg, self.ds.base, part, alloc, router, retriever)

    def run(self, stage: str, gateway: Gateway | None = None) -> FsPath:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        t0 = time.perf_counter()
        path = getattr(self, f"_run_{stage}")(gateway)
        self.timings[stage] = time.perf_counter() - t0
        self._write_timings()
        return path

    def _write_timings(self) -> None:
        path = self.store.root / "timings.json"
        old = json.loads(path.read_text()) if path.exists() else {}
        old.update({k: round(v, 6) for k, v in self.timings.items()})
        path.write_text(dump_json(old))

    def _run_partition(self, _gateway) -> FsPath:
        part = partition_graph(self.ds.base, self.kg, self.cfg.partition)
        return self._emit("partition", part.to_json(self.kg), None)

    def _run_allocate(self, _gateway) -> FsPath:
        part, sha = self._partition()
        alloc, matrix = allocate_partition(self.ds.base, part, self.cfg.allocation.n_max, self.cfg.allocation.theta_coh)
        record_patterns(self.ds.base, self.kg, part, alloc)
        payload = {
            "allocation": alloc.to_json(),
            "matrix": {"question_ids": matrix.question_ids, "values": matrix.values.tolist(),
                       "path_counts": matrix.path_counts},
            "patterns": {r.id: [s.to_json() for s in r.pattern] for r in self.ds.base.records if r.pattern},
        }
        return self._emit("allocate", payload, sha)

    def _run_route(self, _gateway) -> FsPath:
        part, alloc, sha = self._allocation()
        system = self._system(part, alloc)
        plans = [system.router.route(r).to_json(self.kg) for r in self.ds.test]
        return self._emit("route", {"plans": plans}, sha)

    def _run_answer(self, gateway) -> FsPath:
        part, alloc, _ = self._allocation()
        payload, sha = self.store.read("route", self.cfg, self.data_hash)
        system = self._system(part, alloc, gateway)
        by_id = {r.id: r for r in self.ds.test}
        out = []
        for obj in payload["plans"]:
            plan = RetrievalPlan.from_json(obj, self.kg)
            a = execute_plan(system, by_id[plan.question_id], plan, gateway, self.cfg.answer.detect_conflicts,
                             self.cfg.answer.exact_limit)
            out.append({
                "question_id": plan.question_id,
                "mode": plan.mode,
                "answers": a.answers,
                "gold": sorted(a.record.answers),
                "activated": plan.activated_subgraphs(),
                "touched": a.touched,
                "covered": a.covered,
                "lookups": sum(r.lookups for r in a.results),
                "unroutable": plan.unroutable,
                "results": [r.to_json(self.kg) for r in a.results],
                "fusion": a.fusion.to_json(self.kg),
            })
        return self._emit("answer", {"n_entities": self.kg.n_entities, "answers": out}, sha)

    def _run_eval(self, _gateway) -> FsPath:
        payload, sha = self.store.read("answer", self.cfg, self.data_hash)
        rows, traces = [], []
        for a in payload["answers"]:
            flags = sorted(set(a["fusion"]["flags"]) | ({"unroutable"} if a["unroutable"] else set()))
            rows.append(evaluate_question(a["question_id"], a["answers"], a["gold"], activated=len(a["activated"]),
                                          touched=a["touched"], covered=a["covered"], flags=flags))
            traces.append(SearchTrace(a["question_id"], a["touched"], payload["n_entities"], len(a["activated"]),
                                      a["lookups"], empty=a["unroutable"]))
        report = EvalReport(rows).to_json()
        if traces:
            report["search_space"] = measure_search_space(traces)
        return self._emit("eval", report, sha)


def run_all(data_dir, out_dir, cfg: RunConfig | None = None, gateway: Gateway | None = None,
            compact: bool = False) -> FsPath:
    pipe = Pipeline(data_dir, out_dir, cfg, compact)
    path = None
    for stage in STAGES:
        path = pipe.run(stage, gateway)
    return path
