"""Append-only event persistence: the loop's shared knowledge base.

Events land in a single-file log segment (line-delimited JSON, fsynced before
the append returns) with an in-memory index per kind. There are no update or
delete operations; corrections are new events referencing old ones.
"""

from __future__ import annotations

import json
import os
import threading
import uuid
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from .errors import StorageError

EVENT_KINDS = ("trace", "feedback", "label", "dataset", "variant", "rollout", "report")

_SEGMENT_NAME = "events-00000.log"


@dataclass(frozen=True)
class EventRecord:
    event_id: str
    kind: str
    payload: dict[str, Any]
    ingested_at: datetime


@dataclass(frozen=True)
class TimeWindow:
    """Inclusive time window; ``None`` bounds are open ends."""

    start: datetime | None = None
    end: datetime | None = None

    def contains(self, instant: datetime) -> bool:
        if self.start is not None and instant < self.start:
            return False
        if self.end is not None and instant > self.end:
            return False
        return True

    def to_dict(self) -> dict[str, Any]:
        return {
            "start": self.start.isoformat() if self.start else None,
            "end": self.end.isoformat() if self.end else None,
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any] | None) -> TimeWindow:
        raw = raw or {}
        return cls(
            start=datetime.fromisoformat(raw["start"]) if raw.get("start") else None,
            end=datetime.fromisoformat(raw["end"]) if raw.get("end") else None,
        )


class EventStore:
    """Durable append-only log with snapshot-consistent scans.

    Safe for concurrent appenders within one process; appends are serialized
    and each is flushed and fsynced before the call returns.
    """

    def __init__(self, root: str | Path, fsync: bool = True):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._path = self.root / _SEGMENT_NAME
        self._fsync = fsync
        self._lock = threading.Lock()
        self._by_kind: dict[str, list[EventRecord]] = {kind: [] for kind in EVENT_KINDS}
        self._ids: set[str] = set()
        self._replay()
        self._fh = open(self._path, "a", encoding="utf-8")

    def _replay(self) -> None:
        if not self._path.exists():
            return
        with open(self._path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    raw = json.loads(line)
                    record = EventRecord(
                        event_id=raw["event_id"],
                        kind=raw["kind"],
                        payload=raw["payload"],
                        ingested_at=datetime.fromisoformat(raw["ingested_at"]),
                    )
                except (json.JSONDecodeError, KeyError, ValueError):
                    # Torn tail write from a crash: ignore the unacknowledged line.
                    continue
                self._by_kind.setdefault(record.kind, []).append(record)
                self._ids.add(record.event_id)

    def close(self) -> None:
        with self._lock:
            self._fh.close()

    def append(self, kind: str, payload: dict[str, Any]) -> str:
        if kind not in EVENT_KINDS:
            raise StorageError(f"unknown event kind {kind!r}")
        try:
            serialized_payload = json.loads(json.dumps(payload, ensure_ascii=False))
        except (TypeError, ValueError) as exc:
            raise StorageError(f"payload is not serializable: {exc}") from None
        record = EventRecord(
            event_id=uuid.uuid4().hex,
            kind=kind,
            payload=serialized_payload,
            ingested_at=datetime.now(timezone.utc),
        )
        line = json.dumps(
            {
                "event_id": record.event_id,
                "kind": record.kind,
                "payload": record.payload,
                "ingested_at": record.ingested_at.isoformat(),
            },
            ensure_ascii=False,
        )
        with self._lock:
            try:
                self._fh.write(line + "\n")
                self._fh.flush()
                if self._fsync:
                    os.fsync(self._fh.fileno())
            except OSError as exc:
                raise StorageError(f"append failed: {exc}") from None
            self._by_kind.setdefault(kind, []).append(record)
            self._ids.add(record.event_id)
        return record.event_id

    def get(self, event_id: str) -> EventRecord | None:
        with self._lock:
            for records in self._by_kind.values():
                for record in records:
                    if record.event_id == event_id:
                        return record
        return None

    def scan(self, kind: str, window: TimeWindow | None = None) -> list[EventRecord]:
        """Records of one kind inside the window, in ingestion order.

        The snapshot is taken when the scan starts: concurrent appends that
        land afterwards are not included.
        """
        if kind not in EVENT_KINDS:
            raise StorageError(f"unknown event kind {kind!r}")
        with self._lock:
            snapshot = list(self._by_kind.get(kind, ()))
        if window is None:
            return snapshot
        return [record for record in snapshot if window.contains(record.ingested_at)]

    def count(self, kind: str) -> int:
        with self._lock:
            return len(self._by_kind.get(kind, ()))

    def export_lines(self, kind: str, path: str | Path) -> int:
        """Write one JSON record per line for offline analysis."""
        records = self.scan(kind)
        with open(path, "w", encoding="utf-8") as fh:
            for record in records:
                fh.write(
                    json.dumps(
                        {
                            "event_id": record.event_id,
                            "kind": record.kind,
                            "payload": record.payload,
                            "ingested_at": record.ingested_at.isoformat(),
                        },
                        ensure_ascii=False,
                    )
                    + "\n"
                )
        return len(records)
