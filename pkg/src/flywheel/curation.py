"""MAPE Plan: turn feedback into training datasets.

Ground-truth router datasets come from positively-rated traces plus
SME-corrected samples; rephrasal datasets come from few-shot prompted
synthetic generation over a document corpus. Everything is deduplicated,
PII-scrubbed, and deterministically split.
"""

from __future__ import annotations

import ast
import hashlib
import json
import logging
import math
import random
import re
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterable, Sequence

from .errors import (
    BadRatios,
    EmptyDocument,
    GatewayError,
    InvalidArgument,
    ParseError,
    SchemaError,
    StorageError,
)
from .gateway import CompletionRequest, LlmGateway
from .traces import Corpus, Document

if TYPE_CHECKING:
    from .monitor import UnifiedRecord

logger = logging.getLogger(__name__)

ROUTER_TASK = "router"
REPHRASAL_TASK = "rephrasal"

SOURCE_ORGANIC = "organic"
SOURCE_SME = "sme_correction"
SOURCE_SYNTHETIC = "synthetic"

_TERMINAL_PUNCT = ".?!,;:"


def normalize_text(text: str) -> str:
    """Dedup-key normalization: case-fold, collapse whitespace, strip terminal punctuation."""
    collapsed = " ".join(text.split()).casefold()
    return collapsed.rstrip(_TERMINAL_PUNCT).strip()


# --- PII scrubbing -----------------------------------------------------------

DEFAULT_PII_PATTERNS: tuple[tuple[str, re.Pattern[str]], ...] = (
    ("[EMAIL]", re.compile(r"[\w.+-]+@[\w-]+\.[\w.-]+")),
    ("[PHONE]", re.compile(r"\+[1-9]\d{6,13}|\(?\d{3}\)?[ .-]\d{3}[ .-]\d{4}")),
    ("[EMPID]", re.compile(r"\bnv\d{6}\b", re.IGNORECASE)),
)


def scrub_pii(
    text: str,
    patterns: Sequence[tuple[str, re.Pattern[str]]] = DEFAULT_PII_PATTERNS,
) -> str:
    """Replace e-mail addresses, phone numbers and employee ids with placeholders.

    Idempotent: the placeholders themselves never match any pattern.
    """
    for placeholder, pattern in patterns:
        text = pattern.sub(placeholder, text)
    return text


# --- dataset examples ---------------------------------------------------------

def _example_id(task: str, norm_input: str, norm_target: Any) -> str:
    digest = hashlib.sha1(
        "\x1f".join([task, norm_input, repr(norm_target)]).encode()
    ).hexdigest()
    return digest[:16]


@dataclass
class DatasetExample:
    """One supervised example for the router or rephrasal task."""

    task: str
    input: str
    target: str | list[str]
    source: str
    split: str | None = None
    example_id: str = ""

    def __post_init__(self) -> None:
        if self.task not in (ROUTER_TASK, REPHRASAL_TASK):
            raise SchemaError(f"unknown dataset task {self.task!r}")
        if self.source not in (SOURCE_ORGANIC, SOURCE_SME, SOURCE_SYNTHETIC):
            raise SchemaError(f"unknown example source {self.source!r}")
        if isinstance(self.target, list):
            if self.task != REPHRASAL_TASK:
                raise SchemaError("list targets are only valid for the rephrasal task")
            if len(self.target) < 2:
                raise SchemaError("rephrasal targets need at least two entries")
        elif not str(self.target).strip():
            raise SchemaError("target must be non-empty")
        if not self.example_id:
            self.example_id = _example_id(self.task, *self.dedupe_key()[1:])

    def dedupe_key(self) -> tuple[str, str, Any]:
        if isinstance(self.target, list):
            norm_target: Any = tuple(sorted(normalize_text(t) for t in self.target))
        else:
            norm_target = normalize_text(str(self.target))
        return (self.task, normalize_text(self.input), norm_target)

    def to_dict(self) -> dict[str, Any]:
        return {
            "example_id": self.example_id,
            "task": self.task,
            "input": self.input,
            "target": self.target,
            "source": self.source,
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> DatasetExample:
        try:
            return cls(
                task=raw["task"],
                input=raw["input"],
                target=raw["target"],
                source=raw["source"],
                split=raw.get("split"),
                example_id=raw.get("example_id", ""),
            )
        except KeyError as exc:
            raise SchemaError(f"example record missing field {exc}") from None


def make_correction(query: str, expert: str) -> DatasetExample:
    """An SME-confirmed router label."""
    return DatasetExample(
        task=ROUTER_TASK, input=query, target=expert, source=SOURCE_SME
    )


def assemble_router_groundtruth(
    positives: Iterable["UnifiedRecord"],
    corrections: Sequence[DatasetExample],
) -> list[DatasetExample]:
    """Positively-rated traces become organic (query -> expert) examples;
    SME corrections are appended and win on input-text collision."""
    correction_inputs = {normalize_text(c.input) for c in corrections}
    examples: list[DatasetExample] = []
    for record in positives:
        trace = record.trace
        if normalize_text(trace.query) in correction_inputs:
            continue
        examples.append(
            DatasetExample(
                task=ROUTER_TASK,
                input=trace.query,
                target=trace.expert_selected.value,
                source=SOURCE_ORGANIC,
            )
        )
    examples.extend(corrections)
    return examples


_SOURCE_RANK = {SOURCE_SME: 1, SOURCE_ORGANIC: 0, SOURCE_SYNTHETIC: 0}


def dedupe(examples: Sequence[DatasetExample]) -> list[DatasetExample]:
    """Drop duplicates by (task, normalized input, normalized target).

    The first occurrence is kept, except that an SME correction outranks an
    organic or synthetic duplicate regardless of input order. Idempotent.
    """
    kept: dict[tuple[str, str, Any], int] = {}
    result: list[DatasetExample] = []
    for example in examples:
        key = example.dedupe_key()
        if key not in kept:
            kept[key] = len(result)
            result.append(example)
        else:
            index = kept[key]
            if _SOURCE_RANK[example.source] > _SOURCE_RANK[result[index].source]:
                result[index] = example
    return result


_SPLIT_NAMES = {2: ("train", "test"), 3: ("train", "validation", "test")}


def split(
    examples: Sequence[DatasetExample],
    ratios: Sequence[float],
    seed: int,
) -> dict[str, list[DatasetExample]]:
    """Seeded shuffle, then partition with floor(n*ratio) sizes.

    The remainder goes to train. Partitions are disjoint, exhaustive, and
    deterministic per seed; each example's ``split`` field is assigned.
    """
    if len(ratios) not in _SPLIT_NAMES:
        raise BadRatios(f"expected 2 or 3 ratios, got {len(ratios)}")
    if any(r <= 0 for r in ratios):
        raise BadRatios("ratios must be positive")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatios(f"ratios must sum to 1, got {sum(ratios)}")
    names = _SPLIT_NAMES[len(ratios)]
    shuffled = list(examples)
    random.Random(seed).shuffle(shuffled)
    n = len(shuffled)
    # The 1e-9 nudge keeps floor() stable against float representation noise
    # in products like 685 * 0.6.
    sizes = [math.floor(n * ratio + 1e-9) for ratio in ratios]
    sizes[0] += n - sum(sizes)
    partitions: dict[str, list[DatasetExample]] = {}
    cursor = 0
    for name, size in zip(names, sizes):
        part = shuffled[cursor : cursor + size]
        for example in part:
            example.split = name
        partitions[name] = part
        cursor += size
    return partitions


# --- synthetic generation ------------------------------------------------------

@dataclass(frozen=True)
class SynthesisRecord:
    """One generated (question, answer, rephrased-queries) record."""

    question: str
    answer: str
    thought: str
    process: str
    action: str
    action_input: tuple[str, ...]

    def to_prompt_dict(self) -> dict[str, Any]:
        return {
            "Question": self.question,
            "Answer": self.answer,
            "Thought": self.thought,
            "Process": self.process,
            "Action": self.action,
            "Action Input": list(self.action_input),
        }

    @classmethod
    def from_raw(cls, raw: Any) -> SynthesisRecord:
        if not isinstance(raw, dict):
            raise SchemaError(f"synthesis record must be an object, got {type(raw).__name__}")
        missing = [key for key in _SYNTHESIS_KEYS if key not in raw]
        if missing:
            raise SchemaError(f"synthesis record missing keys: {', '.join(missing)}")
        action_input = raw["Action Input"]
        if (
            not isinstance(action_input, list)
            or not action_input
            or not all(isinstance(item, str) for item in action_input)
        ):
            raise SchemaError("Action Input must be a non-empty flat list of strings")
        for key in ("Question", "Answer", "Thought", "Process", "Action"):
            if not isinstance(raw[key], str):
                raise SchemaError(f"{key} must be a string")
        return cls(
            question=raw["Question"],
            answer=raw["Answer"],
            thought=raw["Thought"],
            process=raw["Process"],
            action=raw["Action"],
            action_input=tuple(action_input),
        )

    def to_dataset_example(self) -> DatasetExample:
        return DatasetExample(
            task=REPHRASAL_TASK,
            input=self.question,
            target=list(self.action_input),
            source=SOURCE_SYNTHETIC,
        )


_SYNTHESIS_KEYS = ("Question", "Answer", "Thought", "Process", "Action", "Action Input")

SYNTHESIS_FEWSHOTS: tuple[SynthesisRecord, ...] = (
    SynthesisRecord(
        question="I am based in the Netherlands, when is pay day?",
        answer="25th of every month",
        thought="Payroll timing question; include location keywords in rephrased queries.",
        process="I need to use the Enterprise Knowledge tool",
        action="EnterpriseKnowledge",
        action_input=("payday schedule netherlands", "netherlands pay days"),
    ),
    SynthesisRecord(
        question="point me to gpu fcv page?",
        answer="https://nvidia.sharepoint.com/sites/TechnicalTraining/ASIC",
        thought="Needs GPU FCV (Full Chip Verification) page.",
        process="I need to use the Enterprise Knowledge tool",
        action="EnterpriseKnowledge",
        action_input=("gpu fcv page company", "fcv gpu url"),
    ),
    SynthesisRecord(
        question=(
            "ok, i'm looking for an nvidia icon for biotech / pharmaceuticals to use "
            "in a presentation. can you help me find that?"
        ),
        answer="https://nvidia.sharepoint.com/sites/nvinfo/brand/Pages/default.aspx",
        thought="Needs a company icon for biotech/pharma use.",
        process="I need to use the Enterprise Knowledge tool",
        action="EnterpriseKnowledge",
        action_input=("company icons", "company logos biotech"),
    ),
)

_SYNTHESIS_GUIDELINES = """\
You are a data annotator generating questions, answers, and rephrased questions from an input document and its URL.

Guidelines:
- Identify key phrases and entities in the document and generate questions around them.
- Generate questions answerable using information contained in the input document.
- Do not write questions that require viewing the document to understand the question.
- Avoid phrases like "according to the document/author", "in this document", etc.
- Questions may also be key phrases found in the document.
- Ensure the document contains the complete answer to your question.
- Provide enough context in the question to lead to the specific answer in the document.
- Vary phrasing, vocabulary, complexity, and type of questions.
- Do not copy exact phrasing; use your own words.
- Prefix questions with Question: and answers with Answer:.
- Rephrase each question at least twice (query decomposition/expansion) to aid search.
- Final output must be a Python list.
- Rephrased queries are short, concise keyword/entity mixes; you may replace nvidia with employer or company.
- Provide two or more rephrased queries preserving intent and timeframe.
- If the question asks for "the next X date" without time context, append YYYY (current or next year) in rephrased queries. Example: Question: "when is the next NTech conference" -> "upcoming ntech 2024", "ntech dates 2024", "ntech schedule 2025".

Use the EnterpriseKnowledge tool when:
The user asks for non-sensitive information such as organization info, direct reports, phone numbers, benefits alternate ID, email addresses, working addresses, tax explanations, updating SSN instructions, or stock trading policies.

Your action format MUST be:
Thought: Provide a short analysis of your understanding from the Question.
Process: I need to use the Enterprise Knowledge tool
Action: EnterpriseKnowledge
Action Input: A single line Python list of rephrased queries MUST be generated."""


def build_synthesis_prompt(
    doc: Document,
    fewshots: Sequence[SynthesisRecord] = SYNTHESIS_FEWSHOTS,
) -> str:
    """Guidelines block, few-shot examples, then the document, ending with the output sentinel."""
    if not doc.body or not doc.url:
        raise EmptyDocument(f"document {doc.doc_id!r} needs a non-empty body and url")
    if not fewshots:
        raise InvalidArgument("at least one few-shot example is required")
    parts = [_SYNTHESIS_GUIDELINES, "", "Examples:"]
    for record in fewshots:
        parts.append("Input Document: <Content of input document>")
        parts.append("Input Document url: <url of input document>")
        parts.append("Output:")
        parts.append(json.dumps(record.to_prompt_dict(), ensure_ascii=False, indent=2))
        parts.append("")
    parts.append("Task output format:")
    parts.append("Generate 3 pairs by following the instructions based on the Input Document.")
    parts.append("Strictly return only a Python list of pairs and nothing else.")
    parts.append(f"Input Document: {doc.body}")
    parts.append(f"Input Document url: {doc.url}")
    parts.append("Output: ###")
    return "\n".join(parts)


def load_synthesis_fewshots(path: str | Path | None = None) -> list[SynthesisRecord]:
    """Few-shot examples from a fixture file; defaults to the packaged set."""
    if path is None:
        path = Path(__file__).parent / "data" / "synthesis_fewshots.json"
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise StorageError(f"cannot read few-shot fixture: {exc}") from None
    if not isinstance(payload, list):
        raise SchemaError("few-shot fixture must be a list of records")
    return [SynthesisRecord.from_raw(item) for item in payload]


def parse_synthesis_output(raw: str) -> list[SynthesisRecord]:
    """Parse a completion into synthesis records, validating strictly.

    Accepts a JSON array or a Python list literal of record objects.
    """
    stripped = raw.strip()
    payload: Any = None
    try:
        payload = json.loads(stripped)
    except (json.JSONDecodeError, ValueError):
        try:
            payload = ast.literal_eval(stripped)
        except (SyntaxError, ValueError):
            raise ParseError("synthesis output is neither JSON nor a Python literal") from None
    if not isinstance(payload, list):
        raise ParseError(f"synthesis output must be a list, got {type(payload).__name__}")
    return [SynthesisRecord.from_raw(item) for item in payload]


def generate_synthetic_dataset(
    corpus: Corpus,
    fewshots: Sequence[SynthesisRecord],
    target_count: int,
    gateway: LlmGateway,
    backend_id: str | None = None,
    failure_budget: int = 10,
) -> list[DatasetExample]:
    """Iterate documents, requesting 3 records per document, until the target.

    Parse/schema failures are logged and skipped; gateway failures abort only
    after ``failure_budget`` of them.
    """
    examples: list[DatasetExample] = []
    failures = 0
    for doc in corpus:
        if len(examples) >= target_count:
            break
        if not doc.body or not doc.url:
            continue
        prompt = build_synthesis_prompt(doc, fewshots)
        try:
            result = gateway.complete(
                CompletionRequest(task="synthesis", prompt=prompt), backend_id=backend_id
            )
        except GatewayError:
            failures += 1
            if failures > failure_budget:
                raise
            logger.warning("synthesis call failed for doc %s (%d in budget)", doc.doc_id, failures)
            continue
        try:
            records = parse_synthesis_output(result.text)
        except (ParseError, SchemaError) as exc:
            logger.warning("skipping unparseable synthesis output for doc %s: %s", doc.doc_id, exc)
            continue
        for record in records:
            try:
                example = DatasetExample(
                    task=REPHRASAL_TASK,
                    input=scrub_pii(record.question),
                    target=[scrub_pii(t) for t in record.action_input],
                    source=SOURCE_SYNTHETIC,
                )
            except SchemaError as exc:
                logger.warning("skipping synthesis record for doc %s: %s", doc.doc_id, exc)
                continue
            examples.append(example)
    return dedupe(examples)[:target_count]


# --- dataset files -------------------------------------------------------------

def export_dataset(examples: Sequence[DatasetExample], destination: str | Path) -> int:
    """Write one example per line, ordered by example_id for stable diffs."""
    ordered = sorted(examples, key=lambda e: e.example_id)
    try:
        with open(destination, "w", encoding="utf-8") as fh:
            for example in ordered:
                fh.write(json.dumps(example.to_dict(), ensure_ascii=False) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write dataset: {exc}") from None
    return len(ordered)


def import_dataset(source: str | Path) -> list[DatasetExample]:
    examples = []
    try:
        fh = open(source, encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot read dataset: {exc}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                examples.append(DatasetExample.from_dict(raw))
            except (json.JSONDecodeError, SchemaError) as exc:
                raise SchemaError(f"{source}:{lineno}: {exc}") from None
    return examples
