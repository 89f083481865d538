"""SME triage queue for judge-flagged samples.

Flagged routing verdicts become pending items an operator confirms (with a
corrected label) or dismisses. Confirmed corrections are consumed by exactly
one later dataset assembly; every mutation is an appended label event.
"""

from __future__ import annotations

import uuid
from dataclasses import dataclass
from datetime import datetime
from typing import Any, Iterable

from .curation import DatasetExample, make_correction
from .errors import Conflict, NotFound
from .store import EventStore
from .traces import utc_now

STATUS_PENDING = "pending"
STATUS_CONFIRMED = "confirmed_error"
STATUS_DISMISSED = "dismissed"


@dataclass
class TriageItem:
    item_id: str
    trace_id: str
    query: str
    expert_selected: str
    verdict_summary: str
    status: str = STATUS_PENDING
    sme_expert: str | None = None
    sme_rephrasals: list[str] | None = None
    created_at: datetime | None = None
    consumed_by_cycle: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "item_id": self.item_id,
            "trace_id": self.trace_id,
            "query": self.query,
            "expert_selected": self.expert_selected,
            "verdict_summary": self.verdict_summary,
            "status": self.status,
            "sme_expert": self.sme_expert,
            "sme_rephrasals": self.sme_rephrasals,
            "created_at": self.created_at.isoformat() if self.created_at else None,
            "consumed_by_cycle": self.consumed_by_cycle,
        }


class TriageQueue:
    """Store-backed queue; state is rebuilt from label events on startup."""

    def __init__(self, store: EventStore):
        self.store = store
        self._items: dict[str, TriageItem] = {}
        self._queued_traces: set[str] = set()
        for event in store.scan("label"):
            self._apply(event.payload)

    def _apply(self, payload: dict[str, Any]) -> None:
        kind = payload.get("type")
        if kind == "triage_enqueued":
            item = TriageItem(
                item_id=payload["item_id"],
                trace_id=payload["trace_id"],
                query=payload["query"],
                expert_selected=payload["expert_selected"],
                verdict_summary=payload.get("verdict_summary", ""),
                created_at=datetime.fromisoformat(payload["at"]) if payload.get("at") else None,
            )
            self._items[item.item_id] = item
            self._queued_traces.add(item.trace_id)
        elif kind == "triage_labeled":
            item = self._items.get(payload["item_id"])
            if item is not None:
                item.status = payload["status"]
                item.sme_expert = payload.get("sme_expert")
                item.sme_rephrasals = payload.get("sme_rephrasals")
        elif kind == "triage_consumed":
            for item_id in payload.get("item_ids", []):
                item = self._items.get(item_id)
                if item is not None:
                    item.consumed_by_cycle = payload.get("cycle_id")

    def enqueue(
        self,
        trace_id: str,
        query: str,
        expert_selected: str,
        verdict_summary: str = "",
    ) -> TriageItem | None:
        """Add a flagged sample unless its trace is already queued."""
        if trace_id in self._queued_traces:
            return None
        item = TriageItem(
            item_id=uuid.uuid4().hex,
            trace_id=trace_id,
            query=query,
            expert_selected=expert_selected,
            verdict_summary=verdict_summary,
            created_at=utc_now(),
        )
        self.store.append(
            "label",
            {
                "type": "triage_enqueued",
                "item_id": item.item_id,
                "trace_id": item.trace_id,
                "query": item.query,
                "expert_selected": item.expert_selected,
                "verdict_summary": item.verdict_summary,
                "at": item.created_at.isoformat() if item.created_at else None,
            },
        )
        self._items[item.item_id] = item
        self._queued_traces.add(trace_id)
        return item

    def get(self, item_id: str) -> TriageItem:
        item = self._items.get(item_id)
        if item is None:
            raise NotFound(f"no triage item {item_id!r}")
        return item

    def items(self, status: str | None = None) -> list[TriageItem]:
        found = list(self._items.values())
        if status is not None:
            found = [item for item in found if item.status == status]
        found.sort(key=lambda item: (item.created_at or utc_now(), item.item_id))
        return found

    def label(
        self,
        item_id: str,
        sme_expert: str | None = None,
        sme_rephrasals: list[str] | None = None,
        dismiss: bool = False,
    ) -> TriageItem:
        """Confirm the error with a corrected label, or dismiss the item."""
        item = self.get(item_id)
        if item.status != STATUS_PENDING:
            raise Conflict(f"triage item {item_id!r} already labeled ({item.status})")
        if dismiss:
            item.status = STATUS_DISMISSED
        else:
            if sme_expert is None and not sme_rephrasals:
                raise Conflict("confirming an error requires a corrected label")
            item.status = STATUS_CONFIRMED
            item.sme_expert = sme_expert
            item.sme_rephrasals = list(sme_rephrasals) if sme_rephrasals else None
        self.store.append(
            "label",
            {
                "type": "triage_labeled",
                "item_id": item.item_id,
                "status": item.status,
                "sme_expert": item.sme_expert,
                "sme_rephrasals": item.sme_rephrasals,
            },
        )
        return item

    def confirmed_unconsumed(self) -> list[TriageItem]:
        return [
            item
            for item in self.items(STATUS_CONFIRMED)
            if item.consumed_by_cycle is None
        ]

    def corrections_for_assembly(self) -> list[tuple[TriageItem, DatasetExample]]:
        """Router corrections ready to enter the next ground-truth assembly."""
        pairs = []
        for item in self.confirmed_unconsumed():
            if item.sme_expert:
                pairs.append((item, make_correction(item.query, item.sme_expert)))
        return pairs

    def mark_consumed(self, item_ids: Iterable[str], cycle_id: str) -> None:
        ids = [item_id for item_id in item_ids if item_id in self._items]
        if not ids:
            return
        self.store.append(
            "label",
            {"type": "triage_consumed", "item_ids": ids, "cycle_id": cycle_id},
        )
        for item_id in ids:
            self._items[item_id].consumed_by_cycle = cycle_id
