"""MAPE Execute: variant evaluation, promotion gating, and staged rollout.

Candidate variants are scored on exact-match testsets and a judged regression
set, gated against the baseline, and then ramped shadow -> canary -> full with
deterministic hashed traffic assignment and automatic KPI rollback.
"""

from __future__ import annotations

import hashlib
import re
import threading
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Sequence

from .agent import parse_list_response
from .curation import DatasetExample, normalize_text
from .errors import (
    ApprovalPending,
    DuplicateId,
    EmptyRegressionSet,
    EmptyTestset,
    GatewayError,
    InvalidArgument,
    MismatchedTestsets,
    NotRolling,
    UnknownBackend,
)
from .experts import parse_expert
from .gateway import CompletionRequest, LlmGateway
from .store import EventStore
from .traces import utc_now

VARIANT_TASKS = ("router", "rephrasal", "answer")

STAGE_IDLE = "idle"
STAGE_SHADOW = "shadow"
STAGE_CANARY = "canary"
STAGE_FULL = "full"
STAGE_ROLLED_BACK = "rolled_back"


@dataclass(frozen=True)
class ModelVariant:
    variant_id: str
    task: str
    backend_id: str
    size_label: str = ""
    created_at: datetime = field(default_factory=utc_now)

    def to_dict(self) -> dict[str, Any]:
        return {
            "variant_id": self.variant_id,
            "task": self.task,
            "backend_id": self.backend_id,
            "size_label": self.size_label,
            "created_at": self.created_at.isoformat(),
        }


@dataclass(frozen=True)
class ItemOutcome:
    input: str
    produced: str
    correct: bool
    latency_ms: float | None
    gateway_failed: bool = False


@dataclass(frozen=True)
class EvalResult:
    variant_id: str
    testset_id: str
    accuracy: float
    mean_latency_ms: float
    outcomes: tuple[ItemOutcome, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "variant_id": self.variant_id,
            "testset_id": self.testset_id,
            "accuracy": self.accuracy,
            "mean_latency_ms": self.mean_latency_ms,
            "total": len(self.outcomes),
            "correct": sum(1 for o in self.outcomes if o.correct),
        }


@dataclass(frozen=True)
class RegressionScore:
    variant_id: str
    correctness: float
    helpfulness: float
    conscientiousness: float
    n_queries: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "variant_id": self.variant_id,
            "correctness": self.correctness,
            "helpfulness": self.helpfulness,
            "conscientiousness": self.conscientiousness,
            "n_queries": self.n_queries,
        }


@dataclass(frozen=True)
class RegressionItem:
    query: str
    truth: str = ""


def _item_correct(task: str, produced: str, target: str | list[str]) -> bool:
    if task == "router":
        expert = parse_expert(produced)
        return expert is not None and expert.value == str(target)
    if task == "rephrasal":
        produced_set = {normalize_text(t) for t in parse_list_response(produced)}
        target_list = target if isinstance(target, list) else [str(target)]
        return produced_set == {normalize_text(t) for t in target_list}
    return normalize_text(produced) == normalize_text(str(target))


def evaluate_exact(
    variant: ModelVariant,
    testset: Sequence[DatasetExample],
    gateway: LlmGateway,
    testset_id: str = "testset",
) -> EvalResult:
    """Per-item exact-match accuracy with the gateway-reported mean latency.

    Items whose completion call fails count as incorrect and are flagged.
    """
    if not testset:
        raise EmptyTestset("cannot evaluate on an empty testset")
    mismatched = [e for e in testset if e.task != variant.task]
    if mismatched:
        raise InvalidArgument(
            f"testset task {mismatched[0].task!r} does not match variant task {variant.task!r}"
        )
    outcomes: list[ItemOutcome] = []
    latencies: list[float] = []
    for example in testset:
        try:
            result = gateway.complete(
                CompletionRequest(task=variant.task, prompt=example.input),
                backend_id=variant.backend_id,
            )
        except GatewayError:
            outcomes.append(
                ItemOutcome(
                    input=example.input,
                    produced="",
                    correct=False,
                    latency_ms=None,
                    gateway_failed=True,
                )
            )
            continue
        correct = _item_correct(variant.task, result.text, example.target)
        outcomes.append(
            ItemOutcome(
                input=example.input,
                produced=result.text,
                correct=correct,
                latency_ms=result.latency_ms,
            )
        )
        latencies.append(result.latency_ms)
    correct_count = sum(1 for outcome in outcomes if outcome.correct)
    return EvalResult(
        variant_id=variant.variant_id,
        testset_id=testset_id,
        accuracy=correct_count / len(outcomes),
        mean_latency_ms=sum(latencies) / len(latencies) if latencies else 0.0,
        outcomes=tuple(outcomes),
    )


_SCORE_RES = {
    "correctness": re.compile(r"correctness\s*:\s*([0-9.]+)", re.IGNORECASE),
    "helpfulness": re.compile(r"helpfulness\s*:\s*([0-9.]+)", re.IGNORECASE),
    "conscientiousness": re.compile(r"conscientiousness\s*:\s*([0-9.]+)", re.IGNORECASE),
}


def _parse_regression_scores(text: str) -> dict[str, float]:
    scores = {}
    for name, pattern in _SCORE_RES.items():
        match = pattern.search(text)
        value = float(match.group(1)) if match else 1.0
        scores[name] = min(5.0, max(1.0, value))
    return scores


def build_regression_judge_prompt(query: str, answer: str, truth: str = "") -> str:
    lines = [f"query: {query}", f"answer: {answer}"]
    if truth:
        lines.append(f"expected: {truth}")
    lines.append("score correctness, helpfulness, conscientiousness from 1 to 5")
    return "\n".join(lines)


def evaluate_regression_judged(
    variant: ModelVariant,
    regression_set: Sequence[RegressionItem],
    gateway: LlmGateway,
    judge_backend_id: str | None = None,
) -> RegressionScore:
    """Answer every regression query with the variant's backend and have the
    judge score each answer 1-5 on the three criteria; report the means."""
    if not regression_set:
        raise EmptyRegressionSet("regression set is empty")
    totals = {"correctness": 0.0, "helpfulness": 0.0, "conscientiousness": 0.0}
    for item in regression_set:
        answer = gateway.complete(
            CompletionRequest(task="answer", prompt=item.query),
            backend_id=variant.backend_id,
        )
        judged = gateway.complete(
            CompletionRequest(
                task="regression_judge",
                prompt=build_regression_judge_prompt(item.query, answer.text, item.truth),
            ),
            backend_id=judge_backend_id,
        )
        for name, value in _parse_regression_scores(judged.text).items():
            totals[name] += value
    n = len(regression_set)
    return RegressionScore(
        variant_id=variant.variant_id,
        correctness=totals["correctness"] / n,
        helpfulness=totals["helpfulness"] / n,
        conscientiousness=totals["conscientiousness"] / n,
        n_queries=n,
    )


# --- promotion gate -------------------------------------------------------------

@dataclass(frozen=True)
class GatePolicy:
    accuracy_epsilon: float = 0.005          # tolerated accuracy drop
    regression_drop: float = 0.1             # tolerated judged-correctness drop
    latency_improvement: float = 0.10        # required relative latency win

    def to_dict(self) -> dict[str, Any]:
        return {
            "accuracy_epsilon": self.accuracy_epsilon,
            "regression_drop": self.regression_drop,
            "latency_improvement": self.latency_improvement,
        }


DECISION_PROMOTE = "promote_to_shadow"
DECISION_REJECT = "reject"


@dataclass(frozen=True)
class GateDecision:
    decision: str
    reasons: tuple[str, ...]
    accuracy_delta: float
    latency_reduction: float

    @property
    def promoted(self) -> bool:
        return self.decision == DECISION_PROMOTE

    def to_dict(self) -> dict[str, Any]:
        return {
            "decision": self.decision,
            "reasons": list(self.reasons),
            "accuracy_delta": self.accuracy_delta,
            "latency_reduction": self.latency_reduction,
        }


def gate(
    candidate: EvalResult,
    baseline: EvalResult,
    policy: GatePolicy | None = None,
    candidate_regression: RegressionScore | None = None,
    baseline_regression: RegressionScore | None = None,
) -> GateDecision:
    """Promote iff accuracy holds within epsilon, judged correctness holds,
    and the candidate either cuts latency by the threshold or strictly
    improves accuracy. Rejections list every failed clause."""
    policy = policy or GatePolicy()
    if candidate.testset_id != baseline.testset_id:
        raise MismatchedTestsets(
            f"candidate evaluated on {candidate.testset_id!r}, baseline on {baseline.testset_id!r}"
        )
    failures: list[str] = []
    accuracy_delta = candidate.accuracy - baseline.accuracy
    if candidate.accuracy < baseline.accuracy - policy.accuracy_epsilon:
        failures.append(
            f"accuracy {candidate.accuracy:.4f} below baseline {baseline.accuracy:.4f} "
            f"minus epsilon {policy.accuracy_epsilon}"
        )
    if candidate_regression is not None and baseline_regression is not None:
        if candidate_regression.correctness < baseline_regression.correctness - policy.regression_drop:
            failures.append(
                f"judged correctness {candidate_regression.correctness:.2f} below baseline "
                f"{baseline_regression.correctness:.2f} minus {policy.regression_drop}"
            )
    if baseline.mean_latency_ms > 0:
        latency_reduction = 1.0 - candidate.mean_latency_ms / baseline.mean_latency_ms
    else:
        latency_reduction = 0.0
    improves_latency = latency_reduction >= policy.latency_improvement
    improves_accuracy = candidate.accuracy > baseline.accuracy
    if not improves_latency and not improves_accuracy:
        failures.append(
            f"no improvement: latency reduction {latency_reduction:.2%} below "
            f"{policy.latency_improvement:.0%} and accuracy did not strictly improve"
        )
    decision = DECISION_REJECT if failures else DECISION_PROMOTE
    reasons = tuple(failures) if failures else ("all gate clauses satisfied",)
    return GateDecision(
        decision=decision,
        reasons=reasons,
        accuracy_delta=accuracy_delta,
        latency_reduction=latency_reduction,
    )


# --- rollout state machine --------------------------------------------------------

@dataclass(frozen=True)
class KpiSnapshot:
    accuracy: float
    latency_ms: float
    negative_feedback_rate: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "latency_ms": self.latency_ms,
            "negative_feedback_rate": self.negative_feedback_rate,
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> KpiSnapshot:
        return cls(
            accuracy=float(raw["accuracy"]),
            latency_ms=float(raw["latency_ms"]),
            negative_feedback_rate=float(raw["negative_feedback_rate"]),
        )


@dataclass(frozen=True)
class RolloutThresholds:
    accuracy_epsilon: float = 0.005
    latency_increase: float = 0.10
    negative_feedback_increase: float = 0.02

    def breaches(self, candidate: KpiSnapshot, baseline: KpiSnapshot) -> list[str]:
        breached = []
        if candidate.accuracy < baseline.accuracy - self.accuracy_epsilon:
            breached.append("accuracy")
        if candidate.latency_ms > baseline.latency_ms * (1.0 + self.latency_increase):
            breached.append("latency")
        if (
            candidate.negative_feedback_rate
            > baseline.negative_feedback_rate + self.negative_feedback_increase
        ):
            breached.append("negative_feedback_rate")
        return breached


@dataclass
class Transition:
    from_stage: str
    to_stage: str
    at: datetime
    reason: str
    canary_pct: int | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "from_stage": self.from_stage,
            "to_stage": self.to_stage,
            "at": self.at.isoformat(),
            "reason": self.reason,
            "canary_pct": self.canary_pct,
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> Transition:
        return cls(
            from_stage=raw["from_stage"],
            to_stage=raw["to_stage"],
            at=datetime.fromisoformat(raw["at"]),
            reason=raw.get("reason", ""),
            canary_pct=raw.get("canary_pct"),
        )


@dataclass
class RolloutState:
    task: str
    active_variant: str
    candidate_variant: str | None = None
    stage: str = STAGE_IDLE
    canary_pct: int | None = None
    kpi_window: dict[str, KpiSnapshot] = field(default_factory=dict)
    history: list[Transition] = field(default_factory=list)
    approval_required: bool = False
    approved: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "task": self.task,
            "active_variant": self.active_variant,
            "candidate_variant": self.candidate_variant,
            "stage": self.stage,
            "canary_pct": self.canary_pct,
            "kpi_window": {name: kpi.to_dict() for name, kpi in self.kpi_window.items()},
            "history": [transition.to_dict() for transition in self.history],
            "approval_required": self.approval_required,
            "approved": self.approved,
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> RolloutState:
        return cls(
            task=raw["task"],
            active_variant=raw["active_variant"],
            candidate_variant=raw.get("candidate_variant"),
            stage=raw.get("stage", STAGE_IDLE),
            canary_pct=raw.get("canary_pct"),
            kpi_window={
                name: KpiSnapshot.from_dict(kpi)
                for name, kpi in raw.get("kpi_window", {}).items()
            },
            history=[Transition.from_dict(t) for t in raw.get("history", [])],
            approval_required=raw.get("approval_required", False),
            approved=raw.get("approved", False),
        )


def hash_bucket(session_id: str) -> int:
    """Stable bucket in [0, 10000) for deterministic canary assignment."""
    digest = hashlib.sha256(session_id.encode()).digest()
    return int.from_bytes(digest[:8], "big") % 10000


def assign_traffic(session_id: str, state: RolloutState) -> str:
    """The variant that serves this session under the current stage.

    Assignment is deterministic per session and monotone in the canary
    percentage: once a session is on the candidate it stays there as the
    ramp grows.
    """
    if state.stage in (STAGE_IDLE, STAGE_ROLLED_BACK):
        raise NotRolling(f"no rollout in progress for task {state.task!r}")
    if state.stage == STAGE_FULL:
        assert state.candidate_variant is not None
        return state.candidate_variant
    if state.stage == STAGE_SHADOW:
        return state.active_variant
    assert state.stage == STAGE_CANARY and state.canary_pct is not None
    if hash_bucket(session_id) < state.canary_pct * 100:
        assert state.candidate_variant is not None
        return state.candidate_variant
    return state.active_variant


class RolloutManager:
    """Single-writer owner of the per-task rollout state machines."""

    def __init__(
        self,
        gateway: LlmGateway | None = None,
        store: EventStore | None = None,
        ramp: Sequence[int] = (5, 50),
        thresholds: RolloutThresholds | None = None,
    ):
        if list(ramp) != sorted(set(ramp)) or any(not 1 <= p <= 99 for p in ramp):
            raise InvalidArgument("canary ramp must be strictly increasing percentages in 1..99")
        self.gateway = gateway
        self.store = store
        self.ramp = tuple(int(p) for p in ramp)
        self.thresholds = thresholds or RolloutThresholds()
        self._lock = threading.Lock()
        self._states: dict[str, RolloutState] = {}
        self._variants: dict[str, ModelVariant] = {}
        if store is not None:
            self._reload()

    def _reload(self) -> None:
        assert self.store is not None
        for event in self.store.scan("variant"):
            raw = event.payload
            self._variants[raw["variant_id"]] = ModelVariant(
                variant_id=raw["variant_id"],
                task=raw["task"],
                backend_id=raw["backend_id"],
                size_label=raw.get("size_label", ""),
                created_at=datetime.fromisoformat(raw["created_at"]),
            )
        for event in self.store.scan("rollout"):
            state = RolloutState.from_dict(event.payload["state"])
            self._states[state.task] = state

    def _persist(self, state: RolloutState, transition: Transition | None) -> None:
        if self.store is not None:
            self.store.append(
                "rollout",
                {
                    "task": state.task,
                    "transition": transition.to_dict() if transition else None,
                    "state": state.to_dict(),
                },
            )

    # -- variants ------------------------------------------------------------

    def register_variant(self, variant: ModelVariant) -> str:
        if variant.task not in VARIANT_TASKS:
            raise InvalidArgument(f"unknown variant task {variant.task!r}")
        with self._lock:
            if variant.variant_id in self._variants:
                raise DuplicateId(f"variant already registered: {variant.variant_id}")
            if self.gateway is not None and not self.gateway.has_backend(variant.backend_id):
                raise UnknownBackend(f"variant backend not registered: {variant.backend_id}")
            self._variants[variant.variant_id] = variant
        if self.store is not None:
            self.store.append("variant", variant.to_dict())
        return variant.variant_id

    def get_variant(self, variant_id: str) -> ModelVariant | None:
        return self._variants.get(variant_id)

    # -- state machine ----------------------------------------------------------

    def state_for(self, task: str) -> RolloutState | None:
        return self._states.get(task)

    def ensure_state(self, task: str, active_variant: str) -> RolloutState:
        with self._lock:
            if task not in self._states:
                self._states[task] = RolloutState(task=task, active_variant=active_variant)
            return self._states[task]

    def begin_rollout(
        self, task: str, candidate_variant: str, approval_required: bool = False
    ) -> RolloutState:
        with self._lock:
            state = self._states.get(task)
            if state is None:
                raise InvalidArgument(f"no rollout state for task {task!r}; call ensure_state")
            if state.stage not in (STAGE_IDLE, STAGE_ROLLED_BACK):
                raise InvalidArgument(f"rollout already in progress at stage {state.stage!r}")
            transition = Transition(
                from_stage=state.stage,
                to_stage=STAGE_SHADOW,
                at=utc_now(),
                reason=f"candidate {candidate_variant} promoted to shadow",
            )
            state.candidate_variant = candidate_variant
            state.stage = STAGE_SHADOW
            state.canary_pct = None
            state.approval_required = approval_required
            state.approved = False
            state.history.append(transition)
            self._persist(state, transition)
            return state

    def assign(self, task: str, session_id: str) -> str:
        state = self._states.get(task)
        if state is None:
            raise NotRolling(f"no rollout state for task {task!r}")
        return assign_traffic(session_id, state)

    def advance_rollout(
        self,
        task: str,
        candidate_kpis: KpiSnapshot,
        baseline_kpis: KpiSnapshot,
    ) -> RolloutState:
        """Roll back on any KPI breach, otherwise move one step along the ramp.

        Finishing the ramp requires approval when the state demands it; at the
        full stage a healthy advance finalizes the candidate as active.
        """
        with self._lock:
            state = self._states.get(task)
            if state is None or state.stage == STAGE_IDLE:
                raise NotRolling(f"no rollout in progress for task {task!r}")
            if state.stage == STAGE_ROLLED_BACK:
                raise NotRolling("rollout was rolled back; begin a new one")
            state.kpi_window = {"candidate": candidate_kpis, "baseline": baseline_kpis}
            breached = self.thresholds.breaches(candidate_kpis, baseline_kpis)
            if breached:
                return self._rollback_locked(state, reason="kpi breach: " + ", ".join(breached))
            if state.stage == STAGE_SHADOW:
                return self._transition_locked(
                    state, STAGE_CANARY, self.ramp[0], "healthy in shadow"
                )
            if state.stage == STAGE_CANARY:
                assert state.canary_pct is not None
                remaining = [p for p in self.ramp if p > state.canary_pct]
                if remaining:
                    return self._transition_locked(
                        state, STAGE_CANARY, remaining[0], f"healthy at canary({state.canary_pct})"
                    )
                if state.approval_required and not state.approved:
                    raise ApprovalPending(
                        f"promotion to full for task {task!r} requires operator approval"
                    )
                return self._transition_locked(
                    state, STAGE_FULL, None, f"healthy at canary({state.canary_pct})"
                )
            # Full and healthy: the candidate becomes the active variant.
            assert state.candidate_variant is not None
            new_active = state.candidate_variant
            transition = Transition(
                from_stage=STAGE_FULL,
                to_stage=STAGE_IDLE,
                at=utc_now(),
                reason=f"candidate {new_active} finalized as active",
            )
            state.active_variant = new_active
            state.candidate_variant = None
            state.stage = STAGE_IDLE
            state.canary_pct = None
            state.approved = False
            state.history.append(transition)
            self._persist(state, transition)
            return state

    def _transition_locked(
        self, state: RolloutState, to_stage: str, pct: int | None, reason: str
    ) -> RolloutState:
        transition = Transition(
            from_stage=state.stage
            if state.stage != STAGE_CANARY
            else f"canary({state.canary_pct})",
            to_stage=to_stage if to_stage != STAGE_CANARY else f"canary({pct})",
            at=utc_now(),
            reason=reason,
            canary_pct=pct,
        )
        state.stage = to_stage
        state.canary_pct = pct
        state.history.append(transition)
        self._persist(state, transition)
        return state

    def rollback(self, task: str, reason: str = "operator rollback") -> RolloutState:
        with self._lock:
            state = self._states.get(task)
            if state is None or state.stage == STAGE_IDLE:
                raise NotRolling(f"no rollout in progress for task {task!r}")
            if state.stage == STAGE_ROLLED_BACK:
                return state
            return self._rollback_locked(state, reason)

    def _rollback_locked(self, state: RolloutState, reason: str) -> RolloutState:
        transition = Transition(
            from_stage=state.stage
            if state.stage != STAGE_CANARY
            else f"canary({state.canary_pct})",
            to_stage=STAGE_ROLLED_BACK,
            at=utc_now(),
            reason=reason,
        )
        state.stage = STAGE_ROLLED_BACK
        state.canary_pct = None
        state.approved = False
        state.history.append(transition)
        self._persist(state, transition)
        return state

    def approve(self, task: str) -> RolloutState:
        """Record operator approval for the pending full promotion."""
        with self._lock:
            state = self._states.get(task)
            if (
                state is None
                or state.stage != STAGE_CANARY
                or not state.approval_required
                or state.approved
                or state.canary_pct != self.ramp[-1]
            ):
                raise InvalidArgument(f"nothing pending approval for task {task!r}")
            state.approved = True
            self._persist(state, None)
            return state

    def all_states(self) -> dict[str, RolloutState]:
        return dict(self._states)
