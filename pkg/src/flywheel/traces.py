"""Trace and document records emitted by the query pipeline.

Every answered query produces one :class:`ResponseTrace` capturing the query,
its rephrasings, the chosen expert, retrieval results, the response, and
per-stage latencies. Traces are the raw material the monitoring loop feeds on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator

from .errors import SchemaError, ValidationError
from .experts import ExpertId


class StageName(str, Enum):
    """The seven places the answer pipeline can go wrong, in pipeline order."""

    ROUTER = "router"
    REPHRASAL = "rephrasal"
    RETRIEVAL = "retrieval"
    RERANK = "rerank"
    HALLUCINATION = "hallucination"
    CITATION = "citation"
    ANSWER_GENERATION = "answer_generation"


STAGE_ORDER: tuple[StageName, ...] = tuple(StageName)


@dataclass(frozen=True)
class Document:
    """One entry of a knowledge corpus."""

    doc_id: str
    url: str
    title: str
    body: str
    category: str = ""

    def to_dict(self) -> dict[str, str]:
        return {
            "doc_id": self.doc_id,
            "url": self.url,
            "title": self.title,
            "body": self.body,
            "category": self.category,
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> Document:
        try:
            return cls(
                doc_id=str(raw["doc_id"]),
                url=str(raw.get("url", "")),
                title=str(raw.get("title", "")),
                body=str(raw["body"]),
                category=str(raw.get("category", "")),
            )
        except KeyError as exc:
            raise SchemaError(f"document record missing field {exc}") from None


class Corpus:
    """Immutable document collection with id and url lookups."""

    def __init__(self, documents: Iterable[Document]):
        docs = list(documents)
        by_id: dict[str, Document] = {}
        for doc in docs:
            if doc.doc_id in by_id:
                raise ValidationError(f"duplicate doc_id in corpus: {doc.doc_id}")
            if not doc.body:
                raise ValidationError(f"document {doc.doc_id} has an empty body")
            by_id[doc.doc_id] = doc
        self._docs = docs
        self._by_id = by_id

    def __len__(self) -> int:
        return len(self._docs)

    def __iter__(self) -> Iterator[Document]:
        return iter(self._docs)

    def get(self, doc_id: str) -> Document | None:
        return self._by_id.get(doc_id)

    def url_of(self, doc_id: str) -> str | None:
        doc = self._by_id.get(doc_id)
        return doc.url if doc else None

    @classmethod
    def load(cls, path: str | Path) -> Corpus:
        """Read a corpus from a line-delimited JSON file, one document per line."""
        docs = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    raw = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise SchemaError(f"{path}:{lineno}: invalid corpus line: {exc}") from None
                docs.append(Document.from_dict(raw))
        return cls(docs)

    def dump(self, path: str | Path) -> int:
        with open(path, "w", encoding="utf-8") as fh:
            for doc in self._docs:
                fh.write(json.dumps(doc.to_dict(), ensure_ascii=False) + "\n")
        return len(self._docs)


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


@dataclass
class ResponseTrace:
    """Full instrumentation record for one answered query."""

    trace_id: str
    session_id: str
    turn_index: int
    query: str
    rephrased_query: str
    query_variations: list[str]
    expert_selected: ExpertId
    category: str
    ir_results: list[tuple[str, float]]
    prompts: list[str]
    agent_thought: str
    response_text: str
    citations: list[str]
    followups: list[str]
    guardrail_metrics: dict[str, str]
    stage_latencies: dict[StageName, float]
    total_latency: float
    timestamp: datetime
    failed_at: StageName | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "trace_id": self.trace_id,
            "session_id": self.session_id,
            "turn_index": self.turn_index,
            "query": self.query,
            "rephrased_query": self.rephrased_query,
            "query_variations": list(self.query_variations),
            "expert_selected": self.expert_selected.value,
            "category": self.category,
            "ir_results": [[doc_id, score] for doc_id, score in self.ir_results],
            "prompts": list(self.prompts),
            "agent_thought": self.agent_thought,
            "response_text": self.response_text,
            "citations": list(self.citations),
            "followups": list(self.followups),
            "guardrail_metrics": dict(self.guardrail_metrics),
            "stage_latencies": {stage.value: ms for stage, ms in self.stage_latencies.items()},
            "total_latency": self.total_latency,
            "timestamp": self.timestamp.isoformat(),
            "failed_at": self.failed_at.value if self.failed_at else None,
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> ResponseTrace:
        try:
            return cls(
                trace_id=raw["trace_id"],
                session_id=raw["session_id"],
                turn_index=int(raw["turn_index"]),
                query=raw["query"],
                rephrased_query=raw["rephrased_query"],
                query_variations=list(raw["query_variations"]),
                expert_selected=ExpertId(raw["expert_selected"]),
                category=raw.get("category", ""),
                ir_results=[(doc_id, float(score)) for doc_id, score in raw["ir_results"]],
                prompts=list(raw.get("prompts", [])),
                agent_thought=raw.get("agent_thought", ""),
                response_text=raw["response_text"],
                citations=list(raw.get("citations", [])),
                followups=list(raw.get("followups", [])),
                guardrail_metrics=dict(raw.get("guardrail_metrics", {})),
                stage_latencies={
                    StageName(name): float(ms)
                    for name, ms in raw.get("stage_latencies", {}).items()
                },
                total_latency=float(raw["total_latency"]),
                timestamp=datetime.fromisoformat(raw["timestamp"]),
                failed_at=StageName(raw["failed_at"]) if raw.get("failed_at") else None,
            )
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"malformed trace record: {exc}") from None

    def validate(self, url_of: Any = None, overhead_bound_ms: float = 50.0) -> None:
        """Check structural invariants; ``url_of`` maps doc_id to url for citation checks.

        Raises ValidationError on the first breach.
        """
        if self.turn_index < 0:
            raise ValidationError("turn_index must be non-negative")
        for stage in self.stage_latencies:
            if not isinstance(stage, StageName):
                raise ValidationError(f"unknown stage in latencies: {stage!r}")
        if self.stage_latencies:
            total_stage = sum(self.stage_latencies.values())
            if self.total_latency < max(self.stage_latencies.values()) - 1e-6:
                raise ValidationError("total_latency below the slowest stage")
            if self.total_latency < total_stage - 1e-6:
                raise ValidationError("total_latency below the stage sum")
            if self.total_latency > total_stage + overhead_bound_ms + 1e-6:
                raise ValidationError("total_latency exceeds the stage sum plus overhead bound")
        if url_of is not None and self.citations:
            cited_urls = {url_of(doc_id) for doc_id, _ in self.ir_results}
            cited_urls.discard(None)
            for url in self.citations:
                if url not in cited_urls:
                    raise ValidationError(
                        f"citation {url!r} does not resolve to any retrieved document"
                    )
