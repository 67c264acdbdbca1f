"""Run configuration read from a TOML key = value file."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path as FsPath

import tomli

from .gateway import ConfigError, GatewayConfig
from .partition import PartitionConfig
from .routing import RouterConfig

STAGES = ("partition", "allocate", "route", "answer", "eval")


@dataclass(frozen=True)
class AllocationConfig:
    n_max: int = 5
    theta_coh: float = 0.3


@dataclass(frozen=True)
class AnswerConfig:
    workers: int = 4
    detect_conflicts: bool = True
    exact_limit: int = 20


@dataclass(frozen=True)
class RunConfig:
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    allocation: AllocationConfig = field(default_factory=AllocationConfig)
    router: RouterConfig = field(default_factory=RouterConfig)
    answer: AnswerConfig = field(default_factory=AnswerConfig)
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    stopwords: str | None = None

    def sections(self) -> dict[str, dict]:
        gw = asdict(self.gateway)
        return {
            "partition": {**self.partition.to_json(), "stopwords": self.stopwords},
            "allocate": asdict(self.allocation),
            "route": asdict(self.router),
            # endpoint and credentials do not change results; model choice does
            "answer": {**asdict(self.answer), **{k: gw[k] for k in ("kind", "model_agent", "model_head")}},
            "eval": {},
        }

    def stage_hash(self, stage: str) -> str:
        """Hash of every section up to and including ``stage``."""
        secs = self.sections()
        upto = STAGES[: STAGES.index(stage) + 1]
        blob = json.dumps({s: secs[s] for s in upto}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


def _build(cls, raw: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def parse_config(raw: dict) -> RunConfig:
    sections = {"partition", "allocation", "router", "answer", "gateway", "stopwords"}
    unknown = set(raw) - sections
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    part = dict(raw.get("partition", {}))
    if "lambda" in part:
        part["lam"] = part.pop("lambda")
    return RunConfig(
        partition=_build(PartitionConfig, part, "partition"),
        allocation=_build(AllocationConfig, raw.get("allocation", {}), "allocation"),
        router=_build(RouterConfig, raw.get("router", {}), "router"),
        answer=_build(AnswerConfig, raw.get("answer", {}), "answer"),
        gateway=GatewayConfig.from_sources(raw.get("gateway", {})),
        stopwords=raw.get("stopwords"),
    )


def load_config(path: str | FsPath | None) -> RunConfig:
    if path is None:
        return parse_config({})
    path = FsPath(path)
    try:
        raw = tomli.loads(path.read_text(encoding="utf-8"))
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(raw)
