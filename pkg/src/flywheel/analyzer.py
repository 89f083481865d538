"""MAPE Analyze: attribute negative-feedback traces to pipeline stages.

Routing correctness is judged by a completion backend prompted with a fixed
set of few-shot exemplars; the remaining stages are attributed by ordered
heuristics. Aggregation produces a per-stage error report over a window.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Any, Iterable, Sequence

from .errors import EmptyInput, EmptyTools, GatewayError, InvalidArgument, MalformedVerdict, UnknownAlias
from .experts import JUDGE_ALIASES, judge_alias
from .gateway import CompletionRequest, LlmGateway
from .monitor import UnifiedRecord
from .store import TimeWindow
from .traces import StageName
from .agent import tokenize

logger = logging.getLogger(__name__)

# Few-shot exemplars teaching the judge to call a routing decision YES or NO.
JUDGE_FEWSHOT_PREAMBLE = """\
Question: How do I submit a referral?
Tools: ['it_benefits_help', 'nvinfo_policies_expert']
Reasoning: This question is related to NVIDIA policy which means it should be sent to either 'it_benefits_help' or 'nvinfo_policies_expert'.
Answer: YES

Question: When can I sign up for a new health plan?
Tools: ['finance_expert']
Reasoning: This question is related to employee benefits which means it should be sent to 'it_benefits_help' instead of 'finance_expert'.
Answer: NO

Question: what was NVIDIA's Q3 revenue in fiscal 2024?
Tools: ['finance_expert']
Reasoning: This question is related to NVIDIA's earnings which means it should go to 'finance_expert'.
Answer: YES

Question: Is Mercedes Benz using NVIDIA's digital twin technology?
Tools: ['it_benefits_help', 'nvinfo_policies_expert']
Reasoning: This question is related to NVIDIA's products and therefore should have gone to 'it_benefits_help'.
Answer: YES

Question: What is the vacation policy at NVIDIA?
Tools: ['nvinfo_holiday_expert']
Reasoning: This question is related to NVIDIA policy which means it should be sent to either 'it_benefits_help' or 'nvinfo_policies_expert'.
Answer: NO

Question: When is the next free day at NVIDIA?
Tools: ['nvinfo_holiday_expert']
Reasoning: The user is trying to find the date of a holiday which means that the question should be sent to ['nvinfo_holiday_expert'].
Answer: YES

Question: When is the first open stock sale period in 2025?
Tools: ['finance_expert']
Reasoning: This question is related to NVIDIA's company finances and should therefore be sent to 'finance_expert'.
Answer: YES

Question: How many unused vacation days can I carry over?
Tools: ['it_benefits_help', 'nvinfo_policies_expert']
Reasoning: This question is related to NVIDIA policy and employee benefits which means it should be sent to either 'it_benefits_help' or 'nvinfo_policies_expert'.
Answer: YES

Question: Who heads up wwfo?
Tools: ['finance_expert']
Reasoning: This question is related to NVIDIA's leadership which means that it should be sent to 'finance_expert'.
Answer: YES

Question: Who is John Smith?
Tools: ['finance_expert']
Reasoning: The user is trying to find information about a specific person which means that this question should go to 'it_benefits_help' or 'nvinfo_policies_expert'.
Answer: NO

Question: What are the latest hardware offerings by nvidia?
Tools: ['it_benefits_help', 'nvinfo_policies_expert']
Reasoning: This question is related to NVIDIA's products and therefore should have gone to 'it_benefits_help'.
Answer: YES

Question: What is gb200 nvl72?
Tools: ['finance_expert']
Reasoning: This question is related to NVIDIA's products and therefore should have gone to 'it_benefits_help'.
Answer: NO

Question: When will the 2025 free days be officially announced?
Tools: ['it_benefits_help', 'nvinfo_policies_expert']
Reasoning: This question is related to NVIDIA's policies or benefits, so it should be sent to 'it_benefits_help' or 'nvinfo_policies_expert'.
Answer: YES

Question: Does nvidia offer financial advice services?
Tools: ['finance_expert']
Reasoning: This question is related to NVIDIA's policies or benefits, so it should be sent to 'it_benefits_help' or 'nvinfo_policies_expert'.
Answer: NO

Question: What was the year-over-year (YoY) and quarter-over-quarter (QoQ) growth for Q2 Fiscal 2025?
Tools: ['finance_expert']
Reasoning: This question is related to NVIDIA's earnings and should therefore be routed to 'finance_expert'.
Answer: YES

Question: How do I order a mouse?
Tools: ['it_benefits_help', 'nvinfo_policies_expert']
Reasoning: This question is related to procuring a work accessory, which means that it should go to either 'it_benefits_help' or 'nvinfo_policies_expert'.
Answer: YES

Question: I'm getting a VPN error
Tools: ['finance_expert']
Reasoning: This question is related to an IT issue, which means that it should go to either 'it_benefits_help' or 'nvinfo_policies_expert'.
Answer: NO"""

_KNOWN_ALIASES = set(JUDGE_ALIASES.values())


def build_judge_prompt(query: str, tools: Sequence[str]) -> str:
    """Render the routing-correctness judge prompt for one query.

    The few-shot preamble is fixed; the trailer names the query and the tools
    the router picked, in bracketed quoted style.
    """
    if not tools:
        raise EmptyTools("at least one tool alias is required")
    for tool in tools:
        if tool not in _KNOWN_ALIASES:
            raise UnknownAlias(f"unknown judge alias {tool!r}")
    rendered = "[" + ", ".join(f"'{tool}'" for tool in tools) + "]"
    return f"{JUDGE_FEWSHOT_PREAMBLE}\n\nQUERY: {query}\nTOOLS: {rendered}"


@dataclass(frozen=True)
class JudgeVerdict:
    trace_id: str
    reasoning: str
    routing_correct: bool
    raw: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "trace_id": self.trace_id,
            "reasoning": self.reasoning,
            "routing_correct": self.routing_correct,
            "raw": self.raw,
        }


_ANSWER_RE = re.compile(r"^\s*answer\s*:\s*(yes|no)\b", re.IGNORECASE)
_REASONING_RE = re.compile(r"^\s*reasoning\s*:\s*(.*)$", re.IGNORECASE)


def parse_judge_verdict(raw: str, trace_id: str = "") -> JudgeVerdict:
    """Extract the terminal Answer: YES|NO and the last Reasoning: line."""
    answer: str | None = None
    reasoning = ""
    for line in raw.splitlines():
        answer_match = _ANSWER_RE.match(line)
        if answer_match:
            answer = answer_match.group(1).lower()
        reasoning_match = _REASONING_RE.match(line)
        if reasoning_match:
            reasoning = reasoning_match.group(1).strip()
    if answer is None:
        raise MalformedVerdict("no 'Answer: YES|NO' line in judge output")
    return JudgeVerdict(
        trace_id=trace_id,
        reasoning=reasoning,
        routing_correct=(answer == "yes"),
        raw=raw,
    )


def classify_routing_errors(
    records: Iterable[UnifiedRecord],
    gateway: LlmGateway,
    backend_id: str | None = None,
) -> list[JudgeVerdict]:
    """Judge each record's routing decision; failures leave the record unjudged.

    Verdicts with ``routing_correct=False`` are the flagged set queued for SME
    confirmation.
    """
    verdicts: list[JudgeVerdict] = []
    for record in records:
        trace = record.trace
        prompt = build_judge_prompt(trace.query, [judge_alias(trace.expert_selected)])
        try:
            result = gateway.complete(
                CompletionRequest(task="judge", prompt=prompt), backend_id=backend_id
            )
            verdicts.append(parse_judge_verdict(result.text, trace_id=trace.trace_id))
        except (GatewayError, MalformedVerdict) as exc:
            logger.warning("judge failed for trace %s: %s", trace.trace_id, exc)
    return verdicts


METHOD_JUDGE = "judge"
METHOD_HEURISTIC = "heuristic"
METHOD_SME = "sme_override"


@dataclass(frozen=True)
class AttributionResult:
    trace_id: str
    stage: StageName | None
    method: str
    confidence: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "trace_id": self.trace_id,
            "stage": self.stage.value if self.stage else None,
            "method": self.method,
            "confidence": self.confidence,
        }


_ACRONYM_RE = re.compile(r"\b[A-Z]{3,}\b")


def attribute_failure_stage(
    record: UnifiedRecord, verdict: JudgeVerdict | None = None
) -> AttributionResult:
    """First matching rule wins: judge says misroute; acronym lost in
    rephrasing; empty retrieval; missing citations; otherwise unattributed."""
    trace = record.trace
    if verdict is not None and not verdict.routing_correct:
        return AttributionResult(trace.trace_id, StageName.ROUTER, METHOD_JUDGE, 0.9)
    acronyms = set(_ACRONYM_RE.findall(trace.query))
    if acronyms:
        downstream = tokenize(trace.rephrased_query) | tokenize(" ".join(trace.query_variations))
        if any(acronym.casefold() not in downstream for acronym in acronyms):
            return AttributionResult(trace.trace_id, StageName.REPHRASAL, METHOD_HEURISTIC, 0.7)
    if not trace.ir_results:
        return AttributionResult(trace.trace_id, StageName.RETRIEVAL, METHOD_HEURISTIC, 0.6)
    if not trace.citations and trace.response_text:
        return AttributionResult(trace.trace_id, StageName.CITATION, METHOD_HEURISTIC, 0.5)
    return AttributionResult(trace.trace_id, None, METHOD_HEURISTIC, 0.0)


def _percentage(count: int, total: int) -> Decimal:
    return (Decimal(count) / Decimal(total) * 100).quantize(
        Decimal("0.01"), rounding=ROUND_HALF_UP
    )


@dataclass
class ErrorReport:
    window: TimeWindow | None
    total_negatives: int
    stage_counts: dict[StageName, int]
    unattributed: int
    flagged_trace_ids: list[str] = field(default_factory=list)

    def percentage(self, stage: StageName) -> Decimal:
        return _percentage(self.stage_counts.get(stage, 0), self.total_negatives)

    def unattributed_percentage(self) -> Decimal:
        return _percentage(self.unattributed, self.total_negatives)

    def to_dict(self) -> dict[str, Any]:
        return {
            "window": self.window.to_dict() if self.window else None,
            "total_negatives": self.total_negatives,
            "stages": {
                stage.value: {
                    "count": count,
                    "percentage": str(self.percentage(stage)),
                }
                for stage, count in sorted(self.stage_counts.items(), key=lambda s: s[0].value)
            },
            "unattributed": {
                "count": self.unattributed,
                "percentage": str(self.unattributed_percentage()),
            },
            "flagged_trace_ids": list(self.flagged_trace_ids),
        }

    def render(self) -> str:
        lines = [f"negatives analyzed: {self.total_negatives}"]
        for stage in StageName:
            count = self.stage_counts.get(stage, 0)
            if count:
                lines.append(f"  {stage.value:<18} {count:>5}  {self.percentage(stage):>6}%")
        lines.append(
            f"  {'unattributed':<18} {self.unattributed:>5}  {self.unattributed_percentage():>6}%"
        )
        return "\n".join(lines)


def error_report(
    records: Sequence[UnifiedRecord],
    attributions: Sequence[AttributionResult],
    window: TimeWindow | None = None,
) -> ErrorReport:
    """Aggregate attributions into per-stage counts over the negatives."""
    if not records:
        raise EmptyInput("no negative records to report on")
    by_trace = {attribution.trace_id: attribution for attribution in attributions}
    missing = [r.trace.trace_id for r in records if r.trace.trace_id not in by_trace]
    if missing:
        raise InvalidArgument(f"attributions missing for {len(missing)} records")
    stage_counts: dict[StageName, int] = {}
    unattributed = 0
    flagged: list[str] = []
    for record in records:
        attribution = by_trace[record.trace.trace_id]
        if attribution.stage is None:
            unattributed += 1
        else:
            stage_counts[attribution.stage] = stage_counts.get(attribution.stage, 0) + 1
            if attribution.stage is StageName.ROUTER:
                flagged.append(record.trace.trace_id)
    return ErrorReport(
        window=window,
        total_negatives=len(records),
        stage_counts=stage_counts,
        unattributed=unattributed,
        flagged_trace_ids=flagged,
    )
