"""Acceptance suite: one test per release criterion, each printing a pass line.

Run with ``pytest tests/test_acceptance.py -v -rP`` to see the per-criterion
lines for passing tests.
"""

from __future__ import annotations

import json
import random
import time
from pathlib import Path

import pytest

from flywheel.analyzer import (
    attribute_failure_stage,
    build_judge_prompt,
    classify_routing_errors,
    error_report,
    parse_judge_verdict,
)
from flywheel.cli import main as cli_main
from flywheel.curation import (
    SYNTHESIS_FEWSHOTS,
    DatasetExample,
    assemble_router_groundtruth,
    build_synthesis_prompt,
    dedupe,
    generate_synthetic_dataset,
    make_correction,
    split,
)
from flywheel.experts import ExpertId, judge_alias
from flywheel.gateway import BackendScript, ScriptEntry
from flywheel.monitor import REQUERY_FLAG, Monitor
from flywheel.rollout import (
    STAGE_CANARY,
    STAGE_FULL,
    STAGE_ROLLED_BACK,
    STAGE_SHADOW,
    KpiSnapshot,
    ModelVariant,
    RegressionItem,
    RolloutManager,
    RolloutState,
    assign_traffic,
    build_regression_judge_prompt,
    evaluate_exact,
    evaluate_regression_judged,
    gate,
)
from flywheel.store import EventStore, TimeWindow
from flywheel.traces import Corpus, Document, StageName

from conftest import make_gateway, make_trace, make_unified, ts
from test_rollout import _rephrasal_backend, _rephrasal_testset, _router_backend, _router_testset

FIXTURES = Path(__file__).parent / "fixtures"


def _announce(criterion: int, description: str, started: float) -> None:
    print(f"[acceptance] criterion {criterion} PASS ({description}) in {time.perf_counter() - started:.2f}s")


# -----------------------------------------------------------------------------------
# Criterion 1: error-breakdown reproduction over the 495-negative fixture.
# -----------------------------------------------------------------------------------

def test_criterion_1_error_breakdown_reproduction():
    started = time.perf_counter()
    records = []
    judge_entries = []
    for i in range(495):
        if i < 26:
            query = f"policy question routed badly {i:03d}?"
            expert = ExpertId.HOLIDAYS
            trace = make_trace(query=query, expert=expert, trace_id=f"neg-{i:03d}")
            answer = "NO"
        elif i < 42:
            query = f"what does the ACRO planning team {i:03d} do?"
            expert = ExpertId.SHAREPOINT
            trace = make_trace(
                query=query,
                expert=expert,
                trace_id=f"neg-{i:03d}",
                rephrased=f"acronym expansion team {i:03d}",
                variations=[f"expansion team {i:03d}"],
            )
            answer = "YES"
        else:
            query = f"ordinary failing question {i:03d}?"
            expert = ExpertId.SHAREPOINT
            trace = make_trace(query=query, expert=expert, trace_id=f"neg-{i:03d}")
            answer = "YES"
        records.append(make_unified(trace))
        judge_entries.append(
            ScriptEntry(
                task="judge",
                prompt=build_judge_prompt(query, [judge_alias(expert)]),
                text=f"Reasoning: scripted fixture verdict.\nAnswer: {answer}",
            )
        )
    gateway = make_gateway(
        BackendScript(backend_id="judge", entries=judge_entries), bindings={"judge": "judge"}
    )
    verdicts = classify_routing_errors(records, gateway)
    assert len(verdicts) == 495
    by_trace = {v.trace_id: v for v in verdicts}
    attributions = [
        attribute_failure_stage(record, by_trace[record.trace.trace_id]) for record in records
    ]
    report = error_report(records, attributions)
    assert report.total_negatives == 495
    assert report.stage_counts[StageName.ROUTER] == 26
    assert report.stage_counts[StageName.REPHRASAL] == 16
    assert report.unattributed == 453
    assert str(report.percentage(StageName.ROUTER)) == "5.25"
    assert str(report.percentage(StageName.REPHRASAL)) == "3.23"
    assert str(report.unattributed_percentage()) == "91.52"
    elapsed = time.perf_counter() - started
    assert elapsed < 5.0, f"criterion 1 took {elapsed:.2f}s (budget 5s)"
    _announce(1, "495 negatives -> 5.25% / 3.23% / 91.52%", started)


# -----------------------------------------------------------------------------------
# Criterion 2: dataset pipeline arithmetic, organic and synthetic paths.
# -----------------------------------------------------------------------------------

def test_criterion_2_dataset_pipeline_arithmetic(tmp_path):
    started = time.perf_counter()
    # 729 organic positives, of which 76 duplicate another key after normalization.
    positives = []
    for i in range(653):
        positives.append(
            make_unified(
                make_trace(
                    query=f"well answered question {i:04d}?",
                    expert=ExpertId.SHAREPOINT,
                    trace_id=f"pos-{i:04d}",
                ),
                sentiment="positive",
            )
        )
    for i in range(76):
        positives.append(
            make_unified(
                make_trace(
                    query=f"  WELL   answered question {i:04d} ",
                    expert=ExpertId.SHAREPOINT,
                    trace_id=f"dup-{i:04d}",
                ),
                sentiment="positive",
            )
        )
    corrections = [make_correction(f"sme corrected question {i:02d}?", "policies") for i in range(32)]
    assembled = assemble_router_groundtruth(positives, corrections)
    assert len(assembled) == 761, "assemble must produce 729 + 32 = 761 examples"

    deduped = dedupe(assembled)
    assert len(deduped) == 685, "76 duplicate keys must collapse to 685 unique samples"

    parts = split(deduped, [0.6, 0.4], seed=20260809)
    assert len(parts["train"]) == 411
    assert len(parts["test"]) == 274

    # Synthetic path: scripted generations, 50 examples at 80/10/10.
    corpus = Corpus(
        [
            Document(
                doc_id=f"d{i:02d}",
                url=f"https://kb/{i}",
                title=f"Doc {i}",
                body=f"content body {i}",
            )
            for i in range(17)
        ]
    )
    entries = [
        ScriptEntry(
            task="synthesis",
            prompt=build_synthesis_prompt(doc, SYNTHESIS_FEWSHOTS),
            text=json.dumps(
                [
                    {
                        "Question": f"question about {doc.doc_id} variant {k}?",
                        "Answer": f"answer {doc.doc_id}.{k}",
                        "Thought": "scripted",
                        "Process": "I need to use the Enterprise Knowledge tool",
                        "Action": "EnterpriseKnowledge",
                        "Action Input": [f"{doc.doc_id} keywords {k}", f"variant {k} {doc.doc_id}"],
                    }
                    for k in range(3)
                ]
            ),
        )
        for doc in corpus
    ]
    gateway = make_gateway(
        BackendScript(backend_id="synth", entries=entries), bindings={"synthesis": "synth"}
    )
    synthetic = generate_synthetic_dataset(corpus, SYNTHESIS_FEWSHOTS, 50, gateway)
    assert len(synthetic) == 50
    for example in synthetic:
        assert example.task == "rephrasal"
        assert example.source == "synthetic"
        assert isinstance(example.target, list) and len(example.target) >= 2
    synth_parts = split(synthetic, [0.8, 0.1, 0.1], seed=99)
    assert [len(synth_parts[name]) for name in ("train", "validation", "test")] == [40, 5, 5]
    elapsed = time.perf_counter() - started
    assert elapsed < 5.0, f"criterion 2 took {elapsed:.2f}s (budget 5s)"
    _announce(2, "761 -> 685 -> 411/274 and 50 -> 40/5/5", started)


# -----------------------------------------------------------------------------------
# Criterion 3: judge prompt byte-exactness and exemplar verdict round-trip.
# -----------------------------------------------------------------------------------

def test_criterion_3_judge_prompt_byte_exact_and_verdict_roundtrip():
    started = time.perf_counter()
    golden = (FIXTURES / "judge_prompt_golden.txt").read_bytes()
    built = build_judge_prompt("What is the vacation policy at NVIDIA?", ["nvinfo_holiday_expert"])
    assert built.encode() == golden, "judge prompt must match the golden fixture byte-for-byte"

    preamble = (FIXTURES / "judge_preamble.txt").read_text()
    blocks = preamble.split("\n\n")
    assert len(blocks) == 17
    expected = [
        True, False, True, True, False, True, True, True, True,
        False, True, False, True, False, True, True, False,
    ]
    parsed = [parse_judge_verdict(block).routing_correct for block in blocks]
    mismatches = sum(1 for a, b in zip(parsed, expected) if a != b)
    assert mismatches == 0, "all 17 printed YES/NO verdicts must be recovered exactly"
    _announce(3, "byte-exact prompt, 17/17 verdicts recovered", started)


# -----------------------------------------------------------------------------------
# Criterion 4: injected-failure detection through the CLI simulate + cycle path.
# -----------------------------------------------------------------------------------

def test_criterion_4_injected_failure_detection(tmp_path):
    started = time.perf_counter()
    store = tmp_path / "sim"
    assert (
        cli_main(
            [
                "simulate",
                "--store",
                str(store),
                "--sessions",
                "1000",
                "--error-rate",
                "0.05",
                "--seed",
                "20260809",
            ]
        )
        == 0
    )
    report_path = tmp_path / "report.json"
    assert (
        cli_main(
            ["cycle", "--config", str(store / "cycle_config.json"), "--out", str(report_path)]
        )
        == 0
    )
    report = json.loads(report_path.read_text())
    truth = json.loads((store / "ground_truth.json").read_text())
    flagged = set(report["analyze"]["error_report"]["flagged_trace_ids"])
    injected = {entry["trace_id"] for entry in truth["routing_errors"]}
    assert len(injected) == 50
    true_positives = len(flagged & injected)
    precision = true_positives / len(flagged) if flagged else 0.0
    recall = true_positives / len(injected)
    assert precision >= 0.9, f"routing-error precision {precision:.3f} below 0.9"
    assert recall >= 0.9, f"routing-error recall {recall:.3f} below 0.9"
    router = report["analyze"]["error_report"]["stages"]["router"]
    reported_rate = float(router["percentage"])
    assert abs(reported_rate - 5.0) <= 0.5, f"reported rate {reported_rate}% not within 5% ± 0.5pp"
    elapsed = time.perf_counter() - started
    assert elapsed < 60.0, f"criterion 4 took {elapsed:.2f}s (budget 60s)"
    _announce(4, f"precision={precision:.2f} recall={recall:.2f} rate={reported_rate:.2f}%", started)


# -----------------------------------------------------------------------------------
# Criterion 5: scripted-backend emulation of the router/rephrasal variant tables.
# -----------------------------------------------------------------------------------

def test_criterion_5_variant_table_emulation():
    started = time.perf_counter()
    # Router: baseline 96% at 260 ms vs candidate 96% at 80 ms.
    router_testset = _router_testset(100)
    gateway = make_gateway(
        _router_backend("router-70b-sim", 0.96, 260.0, router_testset),
        _router_backend("router-8b-sim", 0.96, 80.0, router_testset),
    )
    baseline = evaluate_exact(
        ModelVariant(variant_id="router-70b", task="router", backend_id="router-70b-sim", size_label="70B"),
        router_testset,
        gateway,
    )
    candidate = evaluate_exact(
        ModelVariant(variant_id="router-8b", task="router", backend_id="router-8b-sim", size_label="8B"),
        router_testset,
        gateway,
    )
    assert (baseline.accuracy, candidate.accuracy) == (0.96, 0.96)
    assert (baseline.mean_latency_ms, candidate.mean_latency_ms) == (260.0, 80.0)
    decision = gate(candidate, baseline)
    assert decision.promoted, f"gate must promote on the latency clause: {decision.reasons}"
    assert decision.latency_reduction >= 0.69, (
        f"latency reduction {decision.latency_reduction:.2%} below 69%"
    )

    # Rephrasal: baseline 73.8% at 1900 ms vs candidate 77.5% at 1100 ms.
    rephrasal_testset = _rephrasal_testset(1000)
    gateway = make_gateway(
        _rephrasal_backend("rephrasal-70b-sim", 0.738, 1900.0, rephrasal_testset),
        _rephrasal_backend("rephrasal-8b-sim", 0.775, 1100.0, rephrasal_testset),
    )
    reph_baseline = evaluate_exact(
        ModelVariant(variant_id="rephrasal-70b", task="rephrasal", backend_id="rephrasal-70b-sim"),
        rephrasal_testset,
        gateway,
    )
    reph_candidate = evaluate_exact(
        ModelVariant(variant_id="rephrasal-8b", task="rephrasal", backend_id="rephrasal-8b-sim"),
        rephrasal_testset,
        gateway,
    )
    delta = reph_candidate.accuracy - reph_baseline.accuracy
    assert abs(delta - 0.037) < 1e-12, f"accuracy delta {delta} must be +3.7 pp exactly"
    reduction = 1.0 - reph_candidate.mean_latency_ms / reph_baseline.mean_latency_ms
    assert abs(reduction - 0.42) <= 0.01, f"latency reduction {reduction:.2%} not 42% ± 1 pp"
    _announce(
        5,
        f"router 0.96/0.96 at 260->80ms (-{decision.latency_reduction:.0%}), "
        f"rephrasal +{delta * 100:.1f}pp at -{reduction:.0%}",
        started,
    )


# -----------------------------------------------------------------------------------
# Criterion 6: rollout state-machine properties.
# -----------------------------------------------------------------------------------

def test_criterion_6_rollout_state_machine_properties():
    started = time.perf_counter()

    def canary_state(pct: int) -> RolloutState:
        return RolloutState(
            task="router",
            active_variant="active-v",
            candidate_variant="candidate-v",
            stage=STAGE_CANARY,
            canary_pct=pct,
        )

    # Candidate share at canary(5) over 10,000 hashed sessions: 5% ± 0.5 pp.
    state5 = canary_state(5)
    hits = sum(
        1 for i in range(10_000) if assign_traffic(f"sess-{i:05d}", state5) == "candidate-v"
    )
    share = hits / 10_000
    assert abs(share - 0.05) <= 0.005, f"candidate share {share:.4f} not within 5% ± 0.5 pp"

    # Ramp monotonicity across 5 -> 50 -> 100 for 1,000 random session ids.
    rng = random.Random(20260809)
    sessions = [f"user-{rng.randrange(10**12)}" for _ in range(1000)]
    full_state = RolloutState(
        task="router",
        active_variant="active-v",
        candidate_variant="candidate-v",
        stage=STAGE_FULL,
    )
    for session in sessions:
        on5 = assign_traffic(session, canary_state(5)) == "candidate-v"
        on50 = assign_traffic(session, canary_state(50)) == "candidate-v"
        on100 = assign_traffic(session, full_state) == "candidate-v"
        if on5:
            assert on50, f"session {session} fell off the candidate between 5% and 50%"
        if on50:
            assert on100, f"session {session} fell off the candidate between 50% and full"

    # A latency breach (+25%) at any stage rolls back and restores the active variant.
    healthy = KpiSnapshot(accuracy=0.96, latency_ms=100.0, negative_feedback_rate=0.05)
    degraded = KpiSnapshot(accuracy=0.96, latency_ms=125.0, negative_feedback_rate=0.05)
    for steps_before_breach in range(4):  # shadow, canary(5), canary(50), full
        manager = RolloutManager(ramp=(5, 50))
        manager.ensure_state("router", active_variant="active-v")
        manager.begin_rollout("router", "candidate-v")
        for _ in range(steps_before_breach):
            manager.advance_rollout("router", healthy, healthy)
        state = manager.advance_rollout("router", degraded, healthy)
        assert state.stage == STAGE_ROLLED_BACK
        assert state.active_variant == "active-v"
        # Rollback is idempotent: a second rollback changes nothing.
        history_len = len(state.history)
        again = manager.rollback("router")
        assert again.stage == STAGE_ROLLED_BACK
        assert len(again.history) == history_len

    elapsed = time.perf_counter() - started
    assert elapsed < 30.0, f"criterion 6 took {elapsed:.2f}s (budget 30s)"
    _announce(6, f"canary share {share:.2%}, monotone ramp, rollback on breach", started)


# -----------------------------------------------------------------------------------
# Criterion 7: monitor properties (ETL idempotence, join totality, requery flags).
# -----------------------------------------------------------------------------------

def test_criterion_7_monitor_properties(tmp_path):
    started = time.perf_counter()
    store = EventStore(tmp_path / "store", fsync=False)
    try:
        monitor = Monitor(store)
        for i in range(1000):
            monitor.record_response(
                make_trace(
                    query=f"monitored question {i:04d}",
                    session_id=f"s-{i % 211}",
                    turn_index=i // 211,
                    trace_id=f"t-{i:04d}",
                    timestamp=ts(i),
                    citations=[],
                )
            )
            if i % 3 == 0:
                monitor.record_feedback(
                    f"t-{i:04d}", "down" if i % 6 == 0 else "up", timestamp=ts(i)
                )
        window = TimeWindow()
        first = monitor.run_etl(window)
        second = monitor.run_etl(window)
        assert [r.to_dict() for r in first] == [r.to_dict() for r in second], "ETL must be idempotent"
        assert len(first) == 1000, "join totality: one unified record per trace"
        joined = [r.feedback.feedback_id for r in first if r.feedback]
        assert len(joined) == len(set(joined)), "no feedback may join more than one trace"

        # Requery fires exactly on consecutive pairs with hand-computed Jaccard >= 0.6.
        pairs = [
            ("vacation days canada", "canada vacation days policy", 3 / 4, True),
            ("aa bb cc", "aa bb cc dd ee", 3 / 5, True),
            ("payday netherlands", "payday schedule amsterdam office", 1 / 5, False),
            ("cafeteria lunch menu", "stock vesting explained", 0.0, False),
        ]
        for idx, (first_q, second_q, jaccard, should_flag) in enumerate(pairs):
            session = [
                make_trace(query=first_q, session_id=f"rq-{idx}", turn_index=0, trace_id=f"rq-{idx}-0", timestamp=ts(0)),
                make_trace(query=second_q, session_id=f"rq-{idx}", turn_index=1, trace_id=f"rq-{idx}-1", timestamp=ts(60)),
            ]
            flags = monitor.detect_implicit_signals(session, feedback_trace_ids={f"rq-{idx}-1"})
            flagged = REQUERY_FLAG in flags[f"rq-{idx}-0"]
            assert flagged == should_flag, (
                f"pair {idx} with Jaccard {jaccard:.2f} expected flag={should_flag}"
            )
    finally:
        store.close()
    _announce(7, "ETL idempotent, 1000-trace join total, requery at Jaccard >= 0.6", started)


# -----------------------------------------------------------------------------------
# Criterion 8: judged regression plumbing reports the scripted 4.2 mean.
# -----------------------------------------------------------------------------------

def test_criterion_8_regression_judge_mean():
    started = time.perf_counter()
    items = [RegressionItem(query=f"regression query {i:03d}") for i in range(300)]
    judge_entries = []
    for i, item in enumerate(items):
        score = 3.9 if i < 150 else 4.5  # mean = (150*3.9 + 150*4.5) / 300 = 4.2
        judge_entries.append(
            ScriptEntry(
                task="regression_judge",
                prompt=build_regression_judge_prompt(item.query, "scripted answer"),
                text=f"Correctness: {score}\nHelpfulness: 4.0\nConscientiousness: 4.0",
            )
        )
    gateway = make_gateway(
        BackendScript(backend_id="answerer", fallbacks={"answer": "scripted answer"}),
        BackendScript(backend_id="judge", entries=judge_entries),
        bindings={"regression_judge": "judge"},
    )
    variant = ModelVariant(variant_id="pipeline-v", task="answer", backend_id="answerer")
    score = evaluate_regression_judged(variant, items, gateway)
    assert score.n_queries == 300
    assert abs(score.correctness - 4.2) <= 0.001, f"mean correctness {score.correctness} != 4.2"
    _announce(8, f"mean correctness {score.correctness:.3f} over 300 queries", started)
