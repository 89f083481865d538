from __future__ import annotations

from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from flywheel.analyzer import (
    AttributionResult,
    JudgeVerdict,
    attribute_failure_stage,
    build_judge_prompt,
    classify_routing_errors,
    error_report,
    parse_judge_verdict,
)
from flywheel.errors import EmptyInput, EmptyTools, MalformedVerdict, UnknownAlias
from flywheel.experts import ExpertId, judge_alias
from flywheel.gateway import BackendScript, ScriptEntry
from flywheel.traces import StageName

from conftest import make_gateway, make_trace, make_unified

FIXTURES = Path(__file__).parent / "fixtures"

# The printed YES/NO sequence of the 17 few-shot exemplars, in order.
EXPECTED_VERDICTS = [
    True, False, True, True, False, True, True, True, True,
    False, True, False, True, False, True, True, False,
]


def test_judge_prompt_matches_golden_fixture_byte_for_byte():
    golden = (FIXTURES / "judge_prompt_golden.txt").read_bytes()
    built = build_judge_prompt(
        "What is the vacation policy at NVIDIA?", ["nvinfo_holiday_expert"]
    )
    assert built.encode() == golden


def test_judge_prompt_contains_all_seventeen_answer_lines():
    prompt = build_judge_prompt("any query", ["finance_expert"])
    assert sum(1 for line in prompt.splitlines() if line.startswith("Answer:")) == 17


def test_judge_prompt_trailer_renders_tools_in_bracketed_quoted_style():
    prompt = build_judge_prompt("q", ["it_benefits_help", "nvinfo_policies_expert"])
    assert prompt.endswith("QUERY: q\nTOOLS: ['it_benefits_help', 'nvinfo_policies_expert']")


def test_judge_prompt_empty_tools_rejected():
    with pytest.raises(EmptyTools):
        build_judge_prompt("q", [])


def test_judge_prompt_unknown_alias_rejected():
    with pytest.raises(UnknownAlias):
        build_judge_prompt("q", ["mystery_expert"])


def test_parse_verdict_no_example():
    verdict = parse_judge_verdict("Reasoning: benefits question, wrong tool.\nAnswer: NO")
    assert verdict.routing_correct is False
    assert verdict.reasoning == "benefits question, wrong tool."


def test_parse_verdict_case_insensitive():
    assert parse_judge_verdict("answer: yes").routing_correct is True


def test_parse_verdict_without_answer_line_raises():
    with pytest.raises(MalformedVerdict):
        parse_judge_verdict("no answer here")


def test_parse_verdict_takes_terminal_answer():
    raw = "Answer: YES\nsome chatter\nReasoning: second thoughts\nAnswer: NO"
    verdict = parse_judge_verdict(raw)
    assert verdict.routing_correct is False
    assert verdict.reasoning == "second thoughts"


def test_seventeen_exemplar_blocks_round_trip():
    preamble = (FIXTURES / "judge_preamble.txt").read_text()
    blocks = preamble.split("\n\n")
    assert len(blocks) == 17
    parsed = [parse_judge_verdict(block).routing_correct for block in blocks]
    assert parsed == EXPECTED_VERDICTS


# --- classify ------------------------------------------------------------------------

def _judged_fixture(total: int, flagged_indices: set[int]):
    records = []
    entries = []
    for i in range(total):
        trace = make_trace(
            query=f"question number {i:03d} about logistics",
            expert=ExpertId.SHAREPOINT,
            trace_id=f"t-{i:03d}",
        )
        records.append(make_unified(trace))
        answer = "NO" if i in flagged_indices else "YES"
        entries.append(
            ScriptEntry(
                task="judge",
                prompt=build_judge_prompt(trace.query, [judge_alias(trace.expert_selected)]),
                text=f"Reasoning: scripted check {i}.\nAnswer: {answer}",
            )
        )
    gateway = make_gateway(
        BackendScript(backend_id="judge", entries=entries), bindings={"judge": "judge"}
    )
    return records, gateway


def test_classify_flags_designated_records():
    records, gateway = _judged_fixture(20, {2, 9, 17})
    verdicts = classify_routing_errors(records, gateway)
    assert len(verdicts) == 20
    flagged = {verdict.trace_id for verdict in verdicts if not verdict.routing_correct}
    assert flagged == {"t-002", "t-009", "t-017"}


def test_classify_all_yes_flags_nothing():
    records, gateway = _judged_fixture(10, set())
    verdicts = classify_routing_errors(records, gateway)
    assert all(verdict.routing_correct for verdict in verdicts)


def test_classify_gateway_failure_leaves_record_unjudged():
    records, gateway = _judged_fixture(5, set())
    # Re-register a judge whose entry for one record errors out.
    broken = make_trace(query="broken query", expert=ExpertId.SHAREPOINT, trace_id="t-broken")
    records.append(make_unified(broken))
    verdicts = classify_routing_errors(records, gateway)
    assert len(verdicts) == 5  # the unscripted record is skipped, not fabricated
    assert {verdict.trace_id for verdict in verdicts} == {f"t-{i:03d}" for i in range(5)}


# --- attribution -------------------------------------------------------------------

def test_attribute_rule_judge_misroute_wins():
    record = make_unified(make_trace(query="RESS planning team", trace_id="t-1"))
    verdict = JudgeVerdict(trace_id="t-1", reasoning="wrong expert", routing_correct=False, raw="")
    result = attribute_failure_stage(record, verdict)
    assert result.stage is StageName.ROUTER
    assert result.method == "judge"


def test_attribute_rule_lost_acronym_means_rephrasal():
    trace = make_trace(
        query="What is the role of the RESS planning team at NVIDIA?",
        rephrased="NVIDIA Resource Planning team role",
        variations=["resource planning team", "planning team role"],
        trace_id="t-2",
    )
    result = attribute_failure_stage(make_unified(trace), None)
    assert result.stage is StageName.REPHRASAL


def test_attribute_preserved_acronym_not_rephrasal():
    trace = make_trace(
        query="What is the role of the RESS planning team at NVIDIA?",
        rephrased="NVIDIA RESS planning team role",
        variations=["ress planning team"],
        trace_id="t-3",
        ir_results=[],
        citations=[],
    )
    result = attribute_failure_stage(make_unified(trace), None)
    assert result.stage is StageName.RETRIEVAL  # falls through to the next rule


def test_attribute_empty_retrieval():
    trace = make_trace(query="plain question", ir_results=[], citations=[], trace_id="t-4")
    result = attribute_failure_stage(make_unified(trace), None)
    assert result.stage is StageName.RETRIEVAL


def test_attribute_missing_citations():
    trace = make_trace(query="plain question", citations=[], trace_id="t-5")
    result = attribute_failure_stage(make_unified(trace), None)
    assert result.stage is StageName.CITATION


def test_attribute_unattributed_when_no_rule_matches():
    trace = make_trace(query="plain question", trace_id="t-6")
    result = attribute_failure_stage(make_unified(trace), None)
    assert result.stage is None


def test_attribute_deterministic():
    trace = make_trace(query="plain question", trace_id="t-7")
    record = make_unified(trace)
    assert attribute_failure_stage(record, None) == attribute_failure_stage(record, None)


# --- error report ---------------------------------------------------------------------

def _attributions(records, stages):
    return [
        AttributionResult(record.trace.trace_id, stage, "heuristic", 0.5)
        for record, stage in zip(records, stages)
    ]


def test_error_report_paper_breakdown_exact_percentages():
    records = [make_unified(make_trace(trace_id=f"t-{i:03d}")) for i in range(495)]
    stages = (
        [StageName.ROUTER] * 26 + [StageName.REPHRASAL] * 16 + [None] * 453
    )
    report = error_report(records, _attributions(records, stages))
    assert report.total_negatives == 495
    assert str(report.percentage(StageName.ROUTER)) == "5.25"
    assert str(report.percentage(StageName.REPHRASAL)) == "3.23"
    assert str(report.unattributed_percentage()) == "91.52"
    assert report.stage_counts[StageName.ROUTER] == 26
    assert report.stage_counts[StageName.REPHRASAL] == 16
    assert report.unattributed == 453


def test_error_report_all_unattributed():
    records = [make_unified(make_trace(trace_id=f"t-{i}")) for i in range(10)]
    report = error_report(records, _attributions(records, [None] * 10))
    assert report.unattributed == 10
    assert str(report.unattributed_percentage()) == "100.00"


def test_error_report_empty_input_raises():
    with pytest.raises(EmptyInput):
        error_report([], [])


@given(
    st.lists(
        st.sampled_from([StageName.ROUTER, StageName.REPHRASAL, StageName.RETRIEVAL, None]),
        min_size=1,
        max_size=60,
    )
)
def test_error_report_conservation(stages):
    records = [make_unified(make_trace(trace_id=f"t-{i}")) for i in range(len(stages))]
    report = error_report(records, _attributions(records, stages))
    assert sum(report.stage_counts.values()) + report.unattributed == report.total_negatives
