"""Chat-completion gateway: a deterministic offline stub and an HTTP client."""
from __future__ import annotations

import logging
import os
import re
import string
import threading
import time
from dataclasses import dataclass
from typing import Mapping

import httpx

logger = logging.getLogger(__name__)

ROLES = ("subgraph-agent", "head-agent", "summarizer")


class ConfigError(ValueError):
    pass


class GatewayError(RuntimeError):
    pass


AGENT_TEMPLATE = """Given Subgraph Context:
- Entity Types: {{{T_entity}}}
- Relation Types: {{{T_relations}}}
- Coverage: This subgraph focuses on {label} relationships
Given Current Subquestion: {Q_sub}

Task:
1. Analyze the subquestion's core information need
2. Generate {{SPARQL/Cypher}} query matching the subgraph schema

Critical Constraints:
- Use ONLY entities/relations from the subgraph context
- Query returns triples that directly answer the subquestion

Output Requirements:
{{
  "query": "<generated_query>",
  "reasoning": "<brief_explanation_of_strategy>",
}}"""

HEAD_TEMPLATE = """Given verified facts: {T_clean}
Supporting evidence: {E_all}
Original question: {q_new}
Generate final answer with explanations,
resolving any remaining ambiguities."""

SUMMARIZER_TEMPLATE = """Rewrite the following knowledge-graph facts as short evidence sentences.
Use only the facts given; keep every entity name exactly as written.
Subquestion: {Q_sub}
Facts:
{T_clean}"""

PLACEHOLDERS = ("T_entity", "T_relations", "label", "Q_sub", "T_clean", "E_all", "q_new")
_UNFILLED = re.compile(r"\{(%s)\}" % "|".join(PLACEHOLDERS))


@dataclass(frozen=True)
class PromptTemplate:
    role: str
    body: str

    @property
    def placeholders(self) -> frozenset[str]:
        return frozenset(name for _, name, _, _ in string.Formatter().parse(self.body) if name)

    def fill(self, **values: str) -> str:
        missing = self.placeholders - values.keys()
        if missing:
            raise ConfigError(f"{self.role} prompt missing values for {sorted(missing)}")
        return self.body.format(**{k: values[k] for k in self.placeholders})


TEMPLATES = {
    "subgraph-agent": PromptTemplate("subgraph-agent", AGENT_TEMPLATE),
    "head-agent": PromptTemplate("head-agent", HEAD_TEMPLATE),
    "summarizer": PromptTemplate("summarizer", SUMMARIZER_TEMPLATE),
}


@dataclass(frozen=True)
class GatewayConfig:
    kind: str = "stub"
    endpoint: str | None = None
    model_agent: str | None = None
    model_head: str | None = None
    token_env: str = "SPLITRAG_LLM_TOKEN"
    timeout: float = 30.0
    max_retries: int = 2
    max_in_flight: int = 4
    backoff: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in ("stub", "http"):
            raise ConfigError(f"unknown gateway kind {self.kind!r}")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")
        if self.kind == "http" and not self.endpoint:
            raise ConfigError("http gateway needs an endpoint")

    @classmethod
    def from_sources(cls, overrides: Mapping[str, object] | None = None,
                     env: Mapping[str, str] | None = None) -> "GatewayConfig":
        """Environment first, then config-file overrides on top."""
        env = os.environ if env is None else env
        values: dict[str, object] = {}
        for key, var in (("endpoint", "SPLITRAG_LLM_ENDPOINT"), ("model_agent", "SPLITRAG_LLM_MODEL_AGENT"),
                         ("model_head", "SPLITRAG_LLM_MODEL_HEAD")):
            if env.get(var):
                values[key] = env[var]
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls(**values)


class Gateway:
    """Uniform ``complete(role, prompt)`` over stub and HTTP backends.

    The HTTP client speaks the chat-completions convention and bounds the
    number of concurrent requests with a semaphore.
    """

    def __init__(self, cfg: GatewayConfig | None = None, env: Mapping[str, str] | None = None,
                 transport: httpx.BaseTransport | None = None):
        self.cfg = cfg or GatewayConfig()
        self._sem = threading.BoundedSemaphore(self.cfg.max_in_flight)
        self._lock = threading.Lock()
        self.in_flight = 0
        self.peak_in_flight = 0
        self.calls = 0
        self._client = None
        if self.cfg.kind == "http":
            env = os.environ if env is None else env
            token = env.get(self.cfg.token_env)
            if not token:
                raise ConfigError(f"http gateway needs a token in ${self.cfg.token_env}")
            self._client = httpx.Client(
                timeout=self.cfg.timeout,
                headers={"Authorization": f"Bearer {token}"},
                transport=transport,
            )

    @property
    def live(self) -> bool:
        return self.cfg.kind == "http"

    def close(self) -> None:
        if self._client is not None:
            self._client.close()

    def complete(self, role: str, prompt: str) -> str:
        if role not in ROLES:
            raise ConfigError(f"unknown role {role!r}")
        if _UNFILLED.search(prompt):
            raise ConfigError(f"unfilled placeholder in {role} prompt")
        with self._sem:
            with self._lock:
                self.in_flight += 1
                self.calls += 1
                self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
            try:
                if self.cfg.kind == "stub":
                    return _stub_reply(role, prompt)
                return self._post(role, prompt)
            finally:
                with self._lock:
                    self.in_flight -= 1

    def _post(self, role: str, prompt: str) -> str:
        model = self.cfg.model_head if role == "head-agent" else self.cfg.model_agent
        body = {"messages": [{"role": "user", "content": prompt}]}
        if model:
            body["model"] = model
        last: Exception | None = None
        for attempt in range(self.cfg.max_retries + 1):
            if attempt:
                time.sleep(self.cfg.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(self.cfg.endpoint, json=body)
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
                last = exc
                logger.warning("gateway attempt %d/%d failed: %s", attempt + 1, self.cfg.max_retries + 1, exc)
        raise GatewayError(f"{role} request failed after {self.cfg.max_retries + 1} attempts") from last


def _section(prompt: str, start: str, stop: str | None) -> str:
    i = prompt.find(start)
    if i < 0:
        return ""
    i += len(start)
    j = prompt.find(stop, i) if stop else -1
    return prompt[i:j if j >= 0 else None].strip()


def _stub_reply(role: str, prompt: str) -> str:
    if role == "summarizer":
        facts = _section(prompt, "Facts:\n", None)
        return "\n".join(sorted(line for line in facts.splitlines() if line.strip()))
    if role == "head-agent":
        facts = _section(prompt, "Given verified facts:", "Supporting evidence:")
        return f"Answer grounded in verified facts: {facts}" if facts else "unknown"
    return '{"query": "", "reasoning": "offline stub; native traversal used"}'
