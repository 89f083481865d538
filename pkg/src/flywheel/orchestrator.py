"""Drives one full Monitor -> Analyze -> Plan -> Execute cycle.

Each cycle joins the window's telemetry, attributes failures, assembles
datasets when enough confirmed evidence accumulated, evaluates and gates any
configured candidate variant, and advances the rollout one step. Partial
failure in a later stage still persists the earlier artifacts.
"""

from __future__ import annotations

import json
import logging
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .agent import AgentConfig, RagAgent
from .analyzer import (
    attribute_failure_stage,
    classify_routing_errors,
    error_report,
)
from .curation import (
    REPHRASAL_TASK,
    ROUTER_TASK,
    SYNTHESIS_FEWSHOTS,
    DatasetExample,
    SynthesisRecord,
    assemble_router_groundtruth,
    dedupe,
    generate_synthetic_dataset,
    import_dataset,
    split,
)
from .errors import CycleInProgress, FlywheelError, InvalidInterval, NoBackend
from .gateway import LlmGateway, load_scripts_file
from .monitor import Monitor, UnifiedRecord
from .rollout import (
    STAGE_IDLE,
    STAGE_ROLLED_BACK,
    GatePolicy,
    KpiSnapshot,
    ModelVariant,
    RegressionItem,
    RolloutManager,
    RolloutThresholds,
    evaluate_exact,
    evaluate_regression_judged,
    gate,
)
from .store import EventStore, TimeWindow
from .traces import Corpus, utc_now
from .triage import TriageQueue

logger = logging.getLogger(__name__)


@dataclass
class VariantSpec:
    variant_id: str
    backend_id: str
    size_label: str = ""

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> VariantSpec:
        return cls(
            variant_id=raw["variant_id"],
            backend_id=raw["backend_id"],
            size_label=raw.get("size_label", ""),
        )


@dataclass
class ExecuteSpec:
    task: str
    baseline: VariantSpec
    candidate: VariantSpec
    testset: str = "plan:router"          # dataset file path or "plan:router"
    regression_set: str | None = None      # dataset file of regression queries
    approval_required: bool = False

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> ExecuteSpec:
        return cls(
            task=raw.get("task", ROUTER_TASK),
            baseline=VariantSpec.from_dict(raw["baseline"]),
            candidate=VariantSpec.from_dict(raw["candidate"]),
            testset=raw.get("testset", "plan:router"),
            regression_set=raw.get("regression_set"),
            approval_required=bool(raw.get("approval_required", False)),
        )


@dataclass
class CycleConfig:
    store: str
    corpus: str | None = None
    scripts: list[str] = field(default_factory=list)
    seed: int = 1234
    window: TimeWindow = field(default_factory=TimeWindow)
    bindings: dict[str, str] = field(default_factory=dict)
    min_examples_for_dataset: int = 10
    router_split: list[float] = field(default_factory=lambda: [0.6, 0.4])
    synthetic_split: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    synthetic_target: int = 0
    max_fewshots: int = 4
    ramp: list[int] = field(default_factory=lambda: [5, 50])
    gate_policy: GatePolicy = field(default_factory=GatePolicy)
    kpi_thresholds: RolloutThresholds = field(default_factory=RolloutThresholds)
    execute: ExecuteSpec | None = None
    serve_port: int = 8080
    api_token: str | None = None

    @classmethod
    def from_file(cls, path: str | Path) -> CycleConfig:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        base = Path(path).resolve().parent

        def _resolve(value: str | None) -> str | None:
            if value is None:
                return None
            p = Path(value)
            return str(p if p.is_absolute() else base / p)

        gate_raw = raw.get("gate", {})
        kpi_raw = raw.get("kpi_thresholds", {})
        return cls(
            store=_resolve(raw["store"]),
            corpus=_resolve(raw.get("corpus")),
            scripts=[_resolve(p) for p in raw.get("scripts", [])],
            seed=int(raw.get("seed", 1234)),
            window=TimeWindow.from_dict(raw.get("window")),
            bindings=dict(raw.get("bindings", {})),
            min_examples_for_dataset=int(raw.get("min_examples_for_dataset", 10)),
            router_split=[float(r) for r in raw.get("router_split", [0.6, 0.4])],
            synthetic_split=[float(r) for r in raw.get("synthetic_split", [0.8, 0.1, 0.1])],
            synthetic_target=int(raw.get("synthetic_target", 0)),
            max_fewshots=int(raw.get("max_fewshots", 4)),
            ramp=[int(p) for p in raw.get("ramp", [5, 50])],
            gate_policy=GatePolicy(
                accuracy_epsilon=float(gate_raw.get("accuracy_epsilon", 0.005)),
                regression_drop=float(gate_raw.get("regression_drop", 0.1)),
                latency_improvement=float(gate_raw.get("latency_improvement", 0.10)),
            ),
            kpi_thresholds=RolloutThresholds(
                accuracy_epsilon=float(kpi_raw.get("accuracy_epsilon", 0.005)),
                latency_increase=float(kpi_raw.get("latency_increase", 0.10)),
                negative_feedback_increase=float(
                    kpi_raw.get("negative_feedback_increase", 0.02)
                ),
            ),
            execute=ExecuteSpec.from_dict(raw["execute"]) if raw.get("execute") else None,
            serve_port=int(raw.get("serve_port", 8080)),
            api_token=raw.get("api_token"),
        )


@dataclass
class Runtime:
    """The wired-together components one deployment shares."""

    config: CycleConfig
    store: EventStore
    gateway: LlmGateway
    corpus: Corpus | None
    agent: RagAgent
    monitor: Monitor
    triage: TriageQueue
    rollout: RolloutManager


def build_runtime(config: CycleConfig) -> Runtime:
    store = EventStore(config.store)
    gateway = LlmGateway()
    for scripts_path in config.scripts:
        load_scripts_file(scripts_path, gateway)
    for task, backend_id in config.bindings.items():
        gateway.bind(task, backend_id)
    corpus = Corpus.load(config.corpus) if config.corpus else None
    agent = RagAgent(gateway, AgentConfig())
    monitor = Monitor(store, url_of=corpus.url_of if corpus else None)
    triage = TriageQueue(store)
    rollout = RolloutManager(
        gateway=gateway, store=store, ramp=config.ramp, thresholds=config.kpi_thresholds
    )
    return Runtime(
        config=config,
        store=store,
        gateway=gateway,
        corpus=corpus,
        agent=agent,
        monitor=monitor,
        triage=triage,
        rollout=rollout,
    )


@dataclass
class StageOutcome:
    status: str = "skipped"  # complete | failed | skipped
    error: str | None = None
    detail: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"status": self.status, "error": self.error, **self.detail}


@dataclass
class CycleReport:
    cycle_id: str
    window: TimeWindow
    started_at: str
    duration_ms: float = 0.0
    counts: dict[str, int] = field(default_factory=dict)
    monitor: StageOutcome = field(default_factory=StageOutcome)
    analyze: StageOutcome = field(default_factory=StageOutcome)
    plan: StageOutcome = field(default_factory=StageOutcome)
    execute: StageOutcome = field(default_factory=StageOutcome)

    def to_dict(self) -> dict[str, Any]:
        return {
            "type": "cycle_report",
            "cycle_id": self.cycle_id,
            "window": self.window.to_dict(),
            "started_at": self.started_at,
            "duration_ms": self.duration_ms,
            "counts": self.counts,
            "monitor": self.monitor.to_dict(),
            "analyze": self.analyze.to_dict(),
            "plan": self.plan.to_dict(),
            "execute": self.execute.to_dict(),
        }

    def render_summary(self) -> str:
        lines = [
            f"cycle {self.cycle_id}",
            f"  traces={self.counts.get('traces', 0)} "
            f"positives={self.counts.get('positives', 0)} "
            f"negatives={self.counts.get('negatives', 0)}",
            f"  monitor: {self.monitor.status}",
            f"  analyze: {self.analyze.status}",
        ]
        stages = self.analyze.detail.get("error_report", {}).get("stages", {})
        for stage, info in stages.items():
            lines.append(f"    {stage:<18} {info['count']:>5}  {info['percentage']:>6}%")
        unattributed = self.analyze.detail.get("error_report", {}).get("unattributed")
        if unattributed:
            lines.append(
                f"    {'unattributed':<18} {unattributed['count']:>5}  "
                f"{unattributed['percentage']:>6}%"
            )
        lines.append(f"  plan: {self.plan.status}")
        for dataset in self.plan.detail.get("datasets", []):
            sizes = ", ".join(f"{k}={v}" for k, v in dataset["split_sizes"].items())
            lines.append(f"    {dataset['dataset_id']} ({dataset['task']}): {sizes}")
        lines.append(f"  execute: {self.execute.status}")
        gate_info = self.execute.detail.get("gate")
        if gate_info:
            lines.append(f"    gate: {gate_info['decision']}")
        for transition in self.execute.detail.get("transitions", []):
            lines.append(
                f"    rollout: {transition['from_stage']} -> {transition['to_stage']}"
            )
        lines.append(f"  duration_ms: {self.duration_ms:.1f}")
        return "\n".join(lines)


class Orchestrator:
    """Owns cycle sequencing; at most one cycle runs per deployment."""

    def __init__(self, runtime: Runtime):
        self.runtime = runtime
        self._cycle_lock = threading.Lock()

    # -- the four MAPE stages -------------------------------------------------

    def run_cycle(self, window: TimeWindow | None = None) -> CycleReport:
        if not self._cycle_lock.acquire(blocking=False):
            raise CycleInProgress("another cycle is already running")
        try:
            return self._run_cycle_locked(window)
        finally:
            self._cycle_lock.release()

    def _run_cycle_locked(self, window: TimeWindow | None) -> CycleReport:
        config = self.runtime.config
        if window is None:
            window = config.window
        if window.end is None:
            window = TimeWindow(start=window.start, end=utc_now())
        started = time.perf_counter()
        report = CycleReport(
            cycle_id=uuid.uuid4().hex,
            window=window,
            started_at=utc_now().isoformat(),
        )

        unified: list[UnifiedRecord] = []
        negatives: list[UnifiedRecord] = []
        positives: list[UnifiedRecord] = []
        try:
            unified = self.runtime.monitor.run_etl(window)
            negatives = [r for r in unified if r.sentiment == "negative"]
            positives = [r for r in unified if r.sentiment == "positive"]
            report.counts = {
                "traces": len(unified),
                "positives": len(positives),
                "negatives": len(negatives),
            }
            report.monitor = StageOutcome(status="complete")
        except FlywheelError as exc:
            report.monitor = StageOutcome(status="failed", error=str(exc))

        flagged_count = 0
        if report.monitor.status == "complete":
            try:
                report.analyze, flagged_count = self._analyze(negatives, window)
            except FlywheelError as exc:
                report.analyze = StageOutcome(status="failed", error=str(exc))

        if report.monitor.status == "complete":
            try:
                report.plan = self._plan(report.cycle_id, positives, flagged_count)
            except FlywheelError as exc:
                report.plan = StageOutcome(status="failed", error=str(exc))

        if config.execute is not None:
            try:
                report.execute = self._execute(report)
            except FlywheelError as exc:
                report.execute = StageOutcome(status="failed", error=str(exc))

        report.duration_ms = (time.perf_counter() - started) * 1000.0
        self.runtime.store.append("report", report.to_dict())
        return report

    def _analyze(
        self, negatives: list[UnifiedRecord], window: TimeWindow
    ) -> tuple[StageOutcome, int]:
        if not negatives:
            return (
                StageOutcome(
                    status="complete",
                    detail={"error_report": None, "judged": 0, "flagged": 0, "unjudged": 0},
                ),
                0,
            )
        gateway = self.runtime.gateway
        if gateway.binding_for("judge") is None:
            raise NoBackend("no judge backend bound; cannot classify routing errors")
        verdicts = classify_routing_errors(negatives, gateway)
        by_trace = {verdict.trace_id: verdict for verdict in verdicts}
        attributions = [
            attribute_failure_stage(record, by_trace.get(record.trace.trace_id))
            for record in negatives
        ]
        errors = error_report(negatives, attributions, window)
        flagged = [v for v in verdicts if not v.routing_correct]
        by_record = {record.trace.trace_id: record for record in negatives}
        for verdict in flagged:
            record = by_record[verdict.trace_id]
            self.runtime.triage.enqueue(
                trace_id=verdict.trace_id,
                query=record.trace.query,
                expert_selected=record.trace.expert_selected.value,
                verdict_summary=verdict.reasoning,
            )
        outcome = StageOutcome(
            status="complete",
            detail={
                "error_report": errors.to_dict(),
                "judged": len(verdicts),
                "flagged": len(flagged),
                "unjudged": len(negatives) - len(verdicts),
            },
        )
        return outcome, len(flagged)

    def _plan(
        self, cycle_id: str, positives: list[UnifiedRecord], flagged_count: int
    ) -> StageOutcome:
        config = self.runtime.config
        datasets: list[dict[str, Any]] = []
        corrections_pairs = self.runtime.triage.corrections_for_assembly()
        confirmed_count = len(self.runtime.triage.confirmed_unconsumed())
        evidence = flagged_count + confirmed_count
        detail: dict[str, Any] = {
            "evidence": evidence,
            "threshold": config.min_examples_for_dataset,
            "datasets": datasets,
            "corrections_consumed": 0,
        }
        if evidence >= config.min_examples_for_dataset and (positives or corrections_pairs):
            corrections = [example for _, example in corrections_pairs]
            assembled = assemble_router_groundtruth(positives, corrections)
            deduped = dedupe(assembled)
            parts = split(deduped, config.router_split, config.seed)
            dataset_id = f"router-{cycle_id[:8]}"
            self._persist_dataset(dataset_id, ROUTER_TASK, cycle_id, parts)
            datasets.append(
                {
                    "dataset_id": dataset_id,
                    "task": ROUTER_TASK,
                    "size": len(deduped),
                    "split_sizes": {name: len(examples) for name, examples in parts.items()},
                }
            )
            consumed_ids = [item.item_id for item, _ in corrections_pairs]
            self.runtime.triage.mark_consumed(consumed_ids, cycle_id)
            detail["corrections_consumed"] = len(consumed_ids)

        if config.synthetic_target > 0 and self.runtime.corpus is not None:
            fewshots = self._synthesis_fewshots()
            synthetic = generate_synthetic_dataset(
                self.runtime.corpus,
                fewshots,
                config.synthetic_target,
                self.runtime.gateway,
            )
            if synthetic:
                parts = split(synthetic, config.synthetic_split, config.seed)
                dataset_id = f"rephrasal-{cycle_id[:8]}"
                self._persist_dataset(dataset_id, REPHRASAL_TASK, cycle_id, parts)
                datasets.append(
                    {
                        "dataset_id": dataset_id,
                        "task": REPHRASAL_TASK,
                        "size": len(synthetic),
                        "split_sizes": {name: len(examples) for name, examples in parts.items()},
                    }
                )
        return StageOutcome(status="complete", detail=detail)

    def _synthesis_fewshots(self) -> list[SynthesisRecord]:
        """Default few-shots, topped up with confirmed rephrasal corrections."""
        fewshots = list(SYNTHESIS_FEWSHOTS)
        for item in self.runtime.triage.confirmed_unconsumed():
            if item.sme_rephrasals and len(item.sme_rephrasals) >= 2:
                fewshots.append(
                    SynthesisRecord(
                        question=item.query,
                        answer="",
                        thought="rephrase while keeping domain-specific acronyms intact",
                        process="I need to use the Enterprise Knowledge tool",
                        action="EnterpriseKnowledge",
                        action_input=tuple(item.sme_rephrasals),
                    )
                )
        return fewshots[: self.runtime.config.max_fewshots]

    def _persist_dataset(
        self,
        dataset_id: str,
        task: str,
        cycle_id: str,
        parts: dict[str, list[DatasetExample]],
    ) -> None:
        examples = [example for part in parts.values() for example in part]
        self.runtime.store.append(
            "dataset",
            {
                "dataset_id": dataset_id,
                "task": task,
                "cycle_id": cycle_id,
                "split_sizes": {name: len(part) for name, part in parts.items()},
                "examples": [example.to_dict() for example in examples],
            },
        )

    def _execute(self, report: CycleReport) -> StageOutcome:
        config = self.runtime.config
        spec = config.execute
        assert spec is not None
        gateway = self.runtime.gateway
        manager = self.runtime.rollout

        for variant_spec in (spec.baseline, spec.candidate):
            if manager.get_variant(variant_spec.variant_id) is None:
                manager.register_variant(
                    ModelVariant(
                        variant_id=variant_spec.variant_id,
                        task=spec.task,
                        backend_id=variant_spec.backend_id,
                        size_label=variant_spec.size_label,
                    )
                )
        baseline = manager.get_variant(spec.baseline.variant_id)
        candidate = manager.get_variant(spec.candidate.variant_id)
        assert baseline is not None and candidate is not None

        testset = self._load_testset(spec, report)
        if not testset:
            return StageOutcome(status="skipped", detail={"reason": "no testset available"})
        testset_id = spec.testset
        baseline_eval = evaluate_exact(baseline, testset, gateway, testset_id)
        candidate_eval = evaluate_exact(candidate, testset, gateway, testset_id)
        detail: dict[str, Any] = {
            "evaluations": [baseline_eval.to_dict(), candidate_eval.to_dict()],
            "transitions": [],
        }
        candidate_reg = baseline_reg = None
        if spec.regression_set:
            items = [
                RegressionItem(query=e.input, truth=str(e.target))
                for e in import_dataset(spec.regression_set)
            ]
            baseline_reg = evaluate_regression_judged(baseline, items, gateway)
            candidate_reg = evaluate_regression_judged(candidate, items, gateway)
            detail["regression"] = [baseline_reg.to_dict(), candidate_reg.to_dict()]

        negative_rate = 0.0
        if report.counts.get("traces"):
            negative_rate = report.counts.get("negatives", 0) / report.counts["traces"]

        state = manager.state_for(spec.task)
        if state is None or state.stage in (STAGE_IDLE, STAGE_ROLLED_BACK):
            decision = gate(
                candidate_eval,
                baseline_eval,
                config.gate_policy,
                candidate_reg,
                baseline_reg,
            )
            detail["gate"] = decision.to_dict()
            if not decision.promoted:
                return StageOutcome(status="complete", detail=detail)
            manager.ensure_state(spec.task, active_variant=baseline.variant_id)
            state = manager.begin_rollout(
                spec.task, candidate.variant_id, approval_required=spec.approval_required
            )
            detail["transitions"].append(state.history[-1].to_dict())
            return StageOutcome(status="complete", detail=detail)

        # A rollout is in progress: advance it one step on fresh KPIs.
        candidate_kpis = KpiSnapshot(
            accuracy=candidate_eval.accuracy,
            latency_ms=candidate_eval.mean_latency_ms,
            negative_feedback_rate=negative_rate,
        )
        baseline_kpis = KpiSnapshot(
            accuracy=baseline_eval.accuracy,
            latency_ms=baseline_eval.mean_latency_ms,
            negative_feedback_rate=negative_rate,
        )
        try:
            state = manager.advance_rollout(spec.task, candidate_kpis, baseline_kpis)
            detail["transitions"].append(state.history[-1].to_dict())
        except FlywheelError as exc:
            detail["advance_blocked"] = str(exc)
        return StageOutcome(status="complete", detail=detail)

    def _load_testset(self, spec: ExecuteSpec, report: CycleReport) -> list[DatasetExample]:
        if spec.testset == "plan:router":
            datasets = self.runtime.store.scan("dataset")
            for event in reversed(datasets):
                if event.payload.get("task") == ROUTER_TASK:
                    return [
                        DatasetExample.from_dict(raw)
                        for raw in event.payload["examples"]
                        if raw.get("split") == "test"
                    ]
            return []
        return import_dataset(spec.testset)

    # -- scheduling -------------------------------------------------------------

    def schedule_cycles(self, interval_s: float) -> "CycleSchedule":
        if interval_s <= 0:
            raise InvalidInterval("interval must be positive")
        return CycleSchedule(self, interval_s)


class CycleSchedule:
    """Recurring cycle runner; overlapping ticks are skipped, not queued."""

    def __init__(self, orchestrator: Orchestrator, interval_s: float):
        self.orchestrator = orchestrator
        self.interval_s = interval_s
        self.reports: list[CycleReport] = []
        self.skipped_ticks = 0
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    def _loop(self) -> None:
        while not self._stop.wait(self.interval_s):
            try:
                self.reports.append(self.orchestrator.run_cycle())
            except CycleInProgress:
                self.skipped_ticks += 1
            except FlywheelError as exc:
                logger.warning("scheduled cycle failed: %s", exc)

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5)
