"""MAPE Monitor: records response and feedback metrics and joins them.

The scheduled ETL join produces one :class:`UnifiedRecord` per trace in the
window, attaching the latest feedback (if any), the derived sentiment, and
implicit behavioural signals (re-queries, session abandonment).
"""

from __future__ import annotations

import json
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Any, Callable, Iterable

from .agent import tokenize
from .curation import scrub_pii
from .errors import InvalidReason, LockHeld, UnknownTrace
from .store import EventStore, TimeWindow
from .traces import ResponseTrace, utc_now

REQUERY_FLAG = "requery"
ABANDONMENT_FLAG = "abandonment"


class FeedbackReason(str, Enum):
    CITED_SOURCE_USEFULNESS = "cited_source_usefulness"
    RELEVANCE = "relevance"
    CLARITY_COMPLETENESS = "clarity_completeness"
    SUGGESTION = "suggestion"


@dataclass(frozen=True)
class FeedbackRecord:
    feedback_id: str
    trace_id: str
    signal: str  # "up" | "down"
    reasons: frozenset[FeedbackReason]
    free_text: str
    timestamp: datetime

    def to_dict(self) -> dict[str, Any]:
        return {
            "feedback_id": self.feedback_id,
            "trace_id": self.trace_id,
            "signal": self.signal,
            "reasons": sorted(reason.value for reason in self.reasons),
            "free_text": self.free_text,
            "timestamp": self.timestamp.isoformat(),
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> FeedbackRecord:
        return cls(
            feedback_id=raw["feedback_id"],
            trace_id=raw["trace_id"],
            signal=raw["signal"],
            reasons=frozenset(FeedbackReason(r) for r in raw.get("reasons", [])),
            free_text=raw.get("free_text", ""),
            timestamp=datetime.fromisoformat(raw["timestamp"]),
        )


@dataclass
class UnifiedRecord:
    trace: ResponseTrace
    feedback: FeedbackRecord | None
    sentiment: str  # "positive" | "negative" | "none"
    implicit_flags: set[str] = field(default_factory=set)

    def to_dict(self) -> dict[str, Any]:
        return {
            "trace": self.trace.to_dict(),
            "feedback": self.feedback.to_dict() if self.feedback else None,
            "sentiment": self.sentiment,
            "implicit_flags": sorted(self.implicit_flags),
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> UnifiedRecord:
        return cls(
            trace=ResponseTrace.from_dict(raw["trace"]),
            feedback=FeedbackRecord.from_dict(raw["feedback"]) if raw.get("feedback") else None,
            sentiment=raw["sentiment"],
            implicit_flags=set(raw.get("implicit_flags", [])),
        )


def token_jaccard(a: str, b: str) -> float:
    """Jaccard similarity of the case-folded token sets of two strings."""
    ta, tb = tokenize(a), tokenize(b)
    union = ta | tb
    if not union:
        return 0.0
    return len(ta & tb) / len(union)


def sentiment_for(feedback: FeedbackRecord | None) -> str:
    if feedback is None:
        return "none"
    return "positive" if feedback.signal == "up" else "negative"


@dataclass
class MonitorConfig:
    requery_jaccard: float = 0.6
    requery_window_s: float = 300.0
    session_timeout_s: float = 1800.0
    etl_interval_s: float = 4 * 3600.0


class Monitor:
    """Store-backed recorder and the scheduled unifying ETL.

    ``record_response`` and ``record_feedback`` are safe to call concurrently;
    ``run_etl`` is single-flight and fails fast with LockHeld when another run
    is in progress.
    """

    def __init__(
        self,
        store: EventStore,
        url_of: Callable[[str], str | None] | None = None,
        config: MonitorConfig | None = None,
    ):
        self.store = store
        self.url_of = url_of
        self.config = config or MonitorConfig()
        self._etl_lock = threading.Lock()
        self._known_traces: set[str] = {
            record.payload["trace_id"] for record in store.scan("trace")
        }

    def record_response(self, trace: ResponseTrace) -> str:
        trace.validate(url_of=self.url_of)
        event_id = self.store.append("trace", trace.to_dict())
        self._known_traces.add(trace.trace_id)
        return event_id

    def record_feedback(
        self,
        trace_id: str,
        signal: str,
        reasons: Iterable[str] = (),
        free_text: str = "",
        timestamp: datetime | None = None,
    ) -> str:
        if trace_id not in self._known_traces:
            raise UnknownTrace(f"feedback references unknown trace {trace_id!r}")
        if signal not in ("up", "down"):
            raise InvalidReason(f"signal must be 'up' or 'down', got {signal!r}")
        parsed_reasons = set()
        for reason in reasons:
            try:
                parsed_reasons.add(FeedbackReason(reason))
            except ValueError:
                raise InvalidReason(f"unknown feedback reason {reason!r}") from None
        record = FeedbackRecord(
            feedback_id=uuid.uuid4().hex,
            trace_id=trace_id,
            signal=signal,
            reasons=frozenset(parsed_reasons),
            free_text=scrub_pii(free_text),
            timestamp=timestamp or utc_now(),
        )
        return self.store.append("feedback", record.to_dict())

    def run_etl(self, window: TimeWindow) -> list[UnifiedRecord]:
        """Join traces with their latest feedback over the window.

        Idempotent under replay: re-running the same window yields the same
        records. The output is also persisted as a report event.
        """
        if not self._etl_lock.acquire(blocking=False):
            raise LockHeld("an ETL run is already in progress")
        try:
            trace_events = self.store.scan("trace", window)
            feedback_events = self.store.scan("feedback", window)
            traces = [ResponseTrace.from_dict(event.payload) for event in trace_events]
            latest_feedback: dict[str, FeedbackRecord] = {}
            for event in feedback_events:
                record = FeedbackRecord.from_dict(event.payload)
                current = latest_feedback.get(record.trace_id)
                if current is None or record.timestamp >= current.timestamp:
                    latest_feedback[record.trace_id] = record
            flags = self._implicit_flags(traces, set(latest_feedback), as_of=window.end)
            unified = [
                UnifiedRecord(
                    trace=trace,
                    feedback=latest_feedback.get(trace.trace_id),
                    sentiment=sentiment_for(latest_feedback.get(trace.trace_id)),
                    implicit_flags=flags.get(trace.trace_id, set()),
                )
                for trace in traces
            ]
            self.store.append(
                "report",
                {
                    "type": "etl_run",
                    "window": window.to_dict(),
                    "record_count": len(unified),
                    "records": [record.to_dict() for record in unified],
                },
            )
            return unified
        finally:
            self._etl_lock.release()

    def detect_implicit_signals(
        self,
        session_traces: list[ResponseTrace],
        feedback_trace_ids: set[str] | frozenset[str] = frozenset(),
        as_of: datetime | None = None,
    ) -> dict[str, set[str]]:
        """Flags for one session's traces, which must be ordered by turn_index.

        A trace is a re-query when the next query in the session repeats it
        (token Jaccard >= threshold) within the re-query window. The final
        trace is an abandonment when it has no feedback and the session saw no
        successor within the session timeout (always, when ``as_of`` is None).
        """
        flags: dict[str, set[str]] = {trace.trace_id: set() for trace in session_traces}
        for current, nxt in zip(session_traces, session_traces[1:]):
            gap = (nxt.timestamp - current.timestamp).total_seconds()
            if 0 <= gap <= self.config.requery_window_s:
                if token_jaccard(current.query, nxt.query) >= self.config.requery_jaccard:
                    flags[current.trace_id].add(REQUERY_FLAG)
        if session_traces:
            last = session_traces[-1]
            if last.trace_id not in feedback_trace_ids:
                if (
                    as_of is None
                    or (as_of - last.timestamp).total_seconds() >= self.config.session_timeout_s
                ):
                    flags[last.trace_id].add(ABANDONMENT_FLAG)
        return flags

    def _implicit_flags(
        self,
        traces: list[ResponseTrace],
        feedback_trace_ids: set[str],
        as_of: datetime | None,
    ) -> dict[str, set[str]]:
        sessions: dict[str, list[ResponseTrace]] = {}
        for trace in traces:
            sessions.setdefault(trace.session_id, []).append(trace)
        flags: dict[str, set[str]] = {}
        for session in sessions.values():
            session.sort(key=lambda t: t.turn_index)
            flags.update(self.detect_implicit_signals(session, feedback_trace_ids, as_of))
        return flags


def export_unified_records(records: list[UnifiedRecord], path: str) -> int:
    """Write unified records as line-delimited JSON for offline analysis."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")
    return len(records)
