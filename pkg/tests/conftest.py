from __future__ import annotations

import uuid
from datetime import datetime, timedelta, timezone

import pytest

from flywheel.experts import ExpertId
from flywheel.gateway import BackendScript, LlmGateway, ScriptEntry
from flywheel.monitor import FeedbackRecord, UnifiedRecord
from flywheel.store import EventStore
from flywheel.traces import Corpus, Document, ResponseTrace, StageName

BASE_TIME = datetime(2026, 1, 15, 12, 0, 0, tzinfo=timezone.utc)


def make_trace(
    query: str = "what is the badge policy?",
    expert: ExpertId = ExpertId.POLICIES,
    session_id: str = "s-1",
    turn_index: int = 0,
    rephrased: str | None = None,
    variations: list[str] | None = None,
    ir_results: list[tuple[str, float]] | None = None,
    citations: list[str] | None = None,
    response_text: str = "the policy says badges are required",
    timestamp: datetime | None = None,
    trace_id: str | None = None,
) -> ResponseTrace:
    return ResponseTrace(
        trace_id=trace_id or uuid.uuid4().hex,
        session_id=session_id,
        turn_index=turn_index,
        query=query,
        rephrased_query=rephrased if rephrased is not None else query,
        query_variations=variations if variations is not None else [query],
        expert_selected=expert,
        category="kb",
        ir_results=ir_results if ir_results is not None else [("doc-1", 1.0)],
        prompts=[query],
        agent_thought="scripted",
        response_text=response_text,
        citations=citations if citations is not None else ["https://kb.example.com/doc-1"],
        followups=[],
        guardrail_metrics={"content_safety": "pass"},
        stage_latencies={StageName.ROUTER: 5.0, StageName.ANSWER_GENERATION: 20.0},
        total_latency=25.0,
        timestamp=timestamp or BASE_TIME,
    )


def make_unified(
    trace: ResponseTrace, sentiment: str = "negative", feedback: FeedbackRecord | None = None
) -> UnifiedRecord:
    return UnifiedRecord(trace=trace, feedback=feedback, sentiment=sentiment)


def make_corpus() -> Corpus:
    return Corpus(
        [
            Document(
                doc_id="doc-1",
                url="https://kb.example.com/doc-1",
                title="Badge Policy",
                body="badges are required in every office building",
                category="kb",
            ),
            Document(
                doc_id="doc-2",
                url="https://kb.example.com/doc-2",
                title="Vacation Policy",
                body="vacation days accrue monthly and carry over per region policy",
                category="kb",
            ),
            Document(
                doc_id="doc-3",
                url="https://kb.example.com/doc-3",
                title="Cafeteria Hours",
                body="the cafeteria serves lunch menu daily including vegetarian options",
                category="cafe",
            ),
        ]
    )


def make_gateway(*scripts: BackendScript, bindings: dict[str, str] | None = None) -> LlmGateway:
    gateway = LlmGateway()
    for script in scripts:
        gateway.register_script(script)
    for task, backend_id in (bindings or {}).items():
        gateway.bind(task, backend_id)
    return gateway


def simple_script(backend_id: str = "sim", **fallbacks: str) -> BackendScript:
    return BackendScript(backend_id=backend_id, fallbacks=fallbacks)


@pytest.fixture
def store(tmp_path):
    instance = EventStore(tmp_path / "store", fsync=False)
    yield instance
    instance.close()


@pytest.fixture
def corpus():
    return make_corpus()


def entry(task: str, prompt: str, text: str, latency_ms: float | None = None, **kwargs) -> ScriptEntry:
    return ScriptEntry(task=task, prompt=prompt, text=text, latency_ms=latency_ms, **kwargs)


def ts(offset_s: float) -> datetime:
    return BASE_TIME + timedelta(seconds=offset_s)
