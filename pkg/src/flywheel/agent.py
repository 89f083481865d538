"""The simulated mixture-of-experts RAG pipeline that answers queries.

A query flows through router -> conversational rephrase -> query variations ->
retrieval -> rerank/dedup -> answer generation -> citations. Every run emits a
fully populated :class:`ResponseTrace`; stage failures degrade to a no-answer
response instead of raising, so the control loop can observe them.
"""

from __future__ import annotations

import json
import math
import re
import uuid
from dataclasses import dataclass, field

from .errors import EmptyCorpus, GatewayError, InvalidArgument, InvalidQuery
from .experts import ExpertId, parse_expert
from .gateway import CompletionRequest, LlmGateway
from .traces import Corpus, Document, ResponseTrace, StageName, utc_now

DEFAULT_NO_ANSWER = "I don't have enough information to answer this question"

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> set[str]:
    return set(_TOKEN_RE.findall(text.casefold()))


@dataclass
class AgentConfig:
    no_answer_message: str = DEFAULT_NO_ANSWER
    history_window: int = 6
    retrieval_k: int = 5
    context_docs: int = 5
    overhead_bound_ms: float = 50.0
    fallback_expert: ExpertId = ExpertId.SHAREPOINT
    guardrail_checks: dict[str, str] = field(
        default_factory=lambda: {"content_safety": "pass", "grounding": "pass"}
    )


def overlap_score(query_tokens: set[str], doc_tokens: set[str]) -> float:
    """Default lexical scorer: |query ∩ doc| / sqrt(|doc|) over case-folded token sets."""
    if not doc_tokens:
        return 0.0
    return len(query_tokens & doc_tokens) / math.sqrt(len(doc_tokens))


def rerank_dedup(results: list[tuple[str, float]]) -> list[tuple[str, float]]:
    """Keep the best score per doc_id; order by score desc, then doc_id asc."""
    best: dict[str, float] = {}
    for doc_id, score in results:
        if doc_id not in best or score > best[doc_id]:
            best[doc_id] = score
    return sorted(best.items(), key=lambda item: (-item[1], item[0]))


def build_rephrase_prompt(history: list[str], query: str) -> str:
    # The bare query is the last line so a "{last_line}" fallback template
    # yields an identity rephrase for unscripted inputs.
    lines = [f"history: {turn}" for turn in history]
    lines.append(query)
    return "\n".join(lines)


def build_answer_prompt(query: str, docs: list[Document]) -> str:
    lines = [f"question: {query}", "context:"]
    for doc in docs:
        lines.append(f"[{doc.doc_id}] {doc.title}: {doc.body}")
    return "\n".join(lines)


def parse_list_response(text: str) -> list[str]:
    """Best-effort parse of a completion as a list of strings."""
    stripped = text.strip()
    if stripped.startswith("["):
        try:
            parsed = json.loads(stripped)
        except json.JSONDecodeError:
            parsed = None
        if isinstance(parsed, list) and all(isinstance(item, str) for item in parsed):
            return parsed
    return [text.strip()]


class RagAgent:
    """Stateless per request; the corpus is immutable after load."""

    def __init__(self, gateway: LlmGateway, config: AgentConfig | None = None):
        self.gateway = gateway
        self.config = config or AgentConfig()

    # -- individual pipeline stages ----------------------------------------

    def route(
        self,
        query: str,
        history: list[str] | None = None,
        backend_id: str | None = None,
    ) -> tuple[ExpertId, float]:
        expert, confidence, _ = self._route_timed(query, backend_id)
        return expert, confidence

    def _route_timed(
        self, query: str, backend_id: str | None = None
    ) -> tuple[ExpertId, float, float]:
        if not query.strip():
            raise InvalidQuery("query must be non-blank")
        result = self.gateway.complete(
            CompletionRequest(task="router", prompt=query), backend_id=backend_id
        )
        tokens = result.text.split()
        expert = parse_expert(tokens[0]) if tokens else None
        confidence = 1.0
        if expert is None:
            expert = self.config.fallback_expert
            confidence = 0.0
        elif len(tokens) > 1:
            try:
                confidence = min(1.0, max(0.0, float(tokens[1])))
            except ValueError:
                confidence = 1.0
        return expert, confidence, result.latency_ms

    def rephrase_conversational(
        self,
        history: list[str],
        query: str,
        backend_id: str | None = None,
    ) -> str:
        text, _ = self._rephrase_timed(history, query, backend_id)
        return text

    def _rephrase_timed(
        self, history: list[str], query: str, backend_id: str | None = None
    ) -> tuple[str, float]:
        if not query.strip():
            raise InvalidQuery("query must be non-blank")
        if not history:
            return query, 0.0
        window = history[-self.config.history_window :]
        result = self.gateway.complete(
            CompletionRequest(task="rephrasal", prompt=build_rephrase_prompt(window, query)),
            backend_id=backend_id,
        )
        text = result.text.strip()
        return (text or query), result.latency_ms

    def generate_variations(
        self, query: str, k: int, backend_id: str | None = None
    ) -> list[str]:
        variations, _ = self._variations_timed(query, k, backend_id)
        return variations

    def _variations_timed(
        self, query: str, k: int, backend_id: str | None = None
    ) -> tuple[list[str], float]:
        if k < 1:
            raise InvalidArgument("k must be >= 1")
        result = self.gateway.complete(
            CompletionRequest(task="variations", prompt=query), backend_id=backend_id
        )
        seen: list[str] = []
        for item in parse_list_response(result.text):
            item = item.strip()
            if item and item not in seen:
                seen.append(item)
        if not seen:
            seen = [query]
        return seen[:k], result.latency_ms

    def retrieve(
        self, queries: list[str], corpus: Corpus, k: int
    ) -> list[tuple[str, float]]:
        if len(corpus) == 0:
            raise EmptyCorpus("cannot retrieve from an empty corpus")
        if k < 1:
            raise InvalidArgument("k must be >= 1")
        doc_tokens = {doc.doc_id: tokenize(f"{doc.title} {doc.body}") for doc in corpus}
        merged: list[tuple[str, float]] = []
        for query in queries:
            q_tokens = tokenize(query)
            scored = [
                (doc_id, overlap_score(q_tokens, tokens))
                for doc_id, tokens in doc_tokens.items()
            ]
            scored = [item for item in scored if item[1] > 0.0]
            scored.sort(key=lambda item: (-item[1], item[0]))
            merged.extend(scored[:k])
        merged.sort(key=lambda item: (-item[1], item[0]))
        return merged

    def generate_answer(
        self,
        query: str,
        docs: list[Document],
        backend_id: str | None = None,
    ) -> tuple[str, str, list[str], list[str]]:
        answer, thought, citations, followups, _ = self._answer_timed(query, docs, backend_id)
        return answer, thought, citations, followups

    def _answer_timed(
        self, query: str, docs: list[Document], backend_id: str | None = None
    ) -> tuple[str, str, list[str], list[str], float]:
        if not query.strip():
            raise InvalidQuery("query must be non-blank")
        if not docs:
            return self.config.no_answer_message, "no documents retrieved", [], [], 0.0
        result = self.gateway.complete(
            CompletionRequest(task="answer", prompt=build_answer_prompt(query, docs)),
            backend_id=backend_id,
        )
        response = result.text
        thought = f"answered from {len(docs)} retrieved documents"
        followups: list[str] = []
        stripped = result.text.strip()
        if stripped.startswith("{"):
            try:
                payload = json.loads(stripped)
            except json.JSONDecodeError:
                payload = None
            if isinstance(payload, dict) and "response" in payload:
                response = str(payload["response"])
                thought = str(payload.get("thought", thought))
                followups = [str(item) for item in payload.get("followups", [])]
        citations: list[str] = []
        for doc in docs:
            if doc.url and doc.url not in citations:
                citations.append(doc.url)
        return response, thought, citations, followups, result.latency_ms

    # -- full pipeline --------------------------------------------------------

    def answer_query(
        self,
        session_id: str,
        turn_index: int,
        query: str,
        history: list[str],
        corpus: Corpus,
        backend_overrides: dict[str, str] | None = None,
    ) -> ResponseTrace:
        """Run the whole pipeline and return the instrumented trace.

        Stage errors are captured into the trace (``failed_at``) together with
        the degraded no-answer response; only precondition violations raise.
        """
        if not session_id:
            raise InvalidQuery("session_id must be non-empty")
        if turn_index < 0:
            raise InvalidQuery("turn_index must be non-negative")
        if not query.strip():
            raise InvalidQuery("query must be non-blank")
        overrides = backend_overrides or {}

        latencies: dict[StageName, float] = {}
        prompts: list[str] = []
        failed_at: StageName | None = None

        expert = self.config.fallback_expert
        rephrased = query
        variations: list[str] = []
        ir_results: list[tuple[str, float]] = []
        docs: list[Document] = []
        response = self.config.no_answer_message
        thought = ""
        citations: list[str] = []
        followups: list[str] = []
        category = ""

        try:
            prompts.append(query)
            expert, _, router_ms = self._route_timed(query, overrides.get("router"))
            latencies[StageName.ROUTER] = router_ms

            if history:
                window = history[-self.config.history_window :]
                prompts.append(build_rephrase_prompt(window, query))
            rephrased, rephrase_ms = self._rephrase_timed(
                history, query, overrides.get("rephrasal")
            )
            variations, variations_ms = self._variations_timed(
                rephrased, self.config.retrieval_k, overrides.get("variations")
            )
            latencies[StageName.REPHRASAL] = rephrase_ms + variations_ms

            search_queries = [rephrased] + [v for v in variations if v != rephrased]
            ir_results = self.retrieve(search_queries, corpus, self.config.retrieval_k)
            latencies[StageName.RETRIEVAL] = 0.0

            ir_results = rerank_dedup(ir_results)
            latencies[StageName.RERANK] = 0.0

            latencies[StageName.HALLUCINATION] = 0.0

            docs = [
                doc
                for doc_id, _ in ir_results[: self.config.context_docs]
                if (doc := corpus.get(doc_id)) is not None
            ]
            if docs:
                prompts.append(build_answer_prompt(query, docs))
                category = docs[0].category
            response, thought, citations, followups, answer_ms = self._answer_timed(
                query, docs, overrides.get("answer")
            )
            latencies[StageName.ANSWER_GENERATION] = answer_ms
            latencies[StageName.CITATION] = 0.0
        except (GatewayError, EmptyCorpus) as exc:
            failed_at = self._stage_for_progress(latencies)
            response = self.config.no_answer_message
            thought = f"stage {failed_at.value} failed: {exc}"
            citations = []
            followups = []

        total = sum(latencies.values())
        return ResponseTrace(
            trace_id=uuid.uuid4().hex,
            session_id=session_id,
            turn_index=turn_index,
            query=query,
            rephrased_query=rephrased,
            query_variations=variations,
            expert_selected=expert,
            category=category,
            ir_results=ir_results,
            prompts=prompts,
            agent_thought=thought,
            response_text=response,
            citations=citations,
            followups=followups,
            guardrail_metrics=dict(self.config.guardrail_checks),
            stage_latencies=latencies,
            total_latency=total,
            timestamp=utc_now(),
            failed_at=failed_at,
        )

    @staticmethod
    def _stage_for_progress(latencies: dict[StageName, float]) -> StageName:
        """The stage that was running when a failure interrupted the pipeline."""
        for stage in (
            StageName.ROUTER,
            StageName.REPHRASAL,
            StageName.RETRIEVAL,
            StageName.RERANK,
            StageName.HALLUCINATION,
            StageName.ANSWER_GENERATION,
            StageName.CITATION,
        ):
            if stage not in latencies:
                return stage
        return StageName.CITATION
