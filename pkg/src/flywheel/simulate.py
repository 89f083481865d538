"""Seeded traffic generator: populates a store with scripted sessions.

Produces a corpus, backend scripts, session traces with thumbs-down feedback,
and a ground-truth file listing which traces carry injected routing and
rephrasal errors. Everything derives from one seed, so two runs with the same
arguments produce the same traces, scripts and ground truth.
"""

from __future__ import annotations

import json
import random
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Any

from .agent import AgentConfig, RagAgent, build_rephrase_prompt
from .analyzer import build_judge_prompt
from .curation import build_synthesis_prompt
from .errors import InvalidArgument
from .experts import ExpertId, judge_alias
from .gateway import BackendScript, LlmGateway, ScriptEntry, dump_scripts_file
from .monitor import Monitor
from .store import EventStore
from .traces import Corpus, Document

_TOPIC_WORDS = (
    "benefits enrollment dental vision coverage",
    "espp stock purchase vesting schedule",
    "badge access office building parking",
    "travel reimbursement expense policy limits",
    "onboarding laptop setup accounts checklist",
    "wellness program gym membership discount",
    "holiday calendar regional observances",
    "cafeteria menu vegetarian options hours",
    "org chart reporting lines directory",
    "quarterly earnings revenue summary",
    "vpn remote access troubleshooting guide",
    "payroll direct deposit tax forms",
    "relocation support visa immigration",
    "training courses certification catalog",
    "code review standards branch policy",
    "data retention archive compliance rules",
    "conference room booking av equipment",
    "referral bonus hiring process stages",
    "sabbatical leave tenure eligibility",
    "printer setup supplies floor locations",
)

_ACRONYM_EXPANSIONS = {
    "RESS": "real estate and site services",
    "WWFO": "worldwide field operations",
    "GSEC": "global security operations",
    "HRBP": "human resources business partner",
    "ITOC": "infrastructure operations center",
    "FPNA": "financial planning and analysis",
    "EHSS": "environment health safety services",
    "LDAP": "directory account services",
}

SIM_BACKENDS = {
    "router": "sim-router",
    "rephrasal": "sim-rephrasal",
    "variations": "sim-variations",
    "answer": "sim-answer",
    "judge": "sim-judge",
    "synthesis": "sim-synthesis",
    "regression_judge": "sim-regression-judge",
}


@dataclass
class SimulationResult:
    sessions: int
    traces: int
    negatives: int
    routing_error_trace_ids: list[str] = field(default_factory=list)
    rephrasal_error_trace_ids: list[str] = field(default_factory=list)
    store_dir: str = ""
    corpus_path: str = ""
    scripts_path: str = ""
    ground_truth_path: str = ""
    cycle_config_path: str = ""


def _build_corpus(size: int = 20) -> Corpus:
    docs = []
    for i, words in enumerate(_TOPIC_WORDS[:size]):
        title = words.split()[0].title() + " Guide"
        docs.append(
            Document(
                doc_id=f"doc-{i:03d}",
                url=f"https://intranet.example.com/kb/{i:03d}",
                title=title,
                body=f"{words}. Detailed internal documentation about {words}.",
                category=f"kb-{i % 5}",
            )
        )
    return Corpus(docs)


def _deterministic_id(rng: random.Random) -> str:
    return uuid.UUID(int=rng.getrandbits(128)).hex


def build_simulation_scripts(
    seed: int, sessions: int, error_rate: float, corpus: Corpus
) -> tuple[list[BackendScript], dict[str, str], list[dict[str, Any]]]:
    """Backend scripts plus one session plan per simulated session.

    The plan rows carry everything needed to replay a session: queries,
    history, the class of injected failure, and the expert the scripted
    router will answer with.
    """
    rng = random.Random(seed)
    n_routing = int(round(sessions * error_rate))
    n_rephrasal = int(round(sessions * error_rate))
    if n_routing + n_rephrasal > sessions:
        raise InvalidArgument("error rate too high for the session count")
    indices = list(range(sessions))
    routing_set = set(rng.sample(indices, n_routing))
    remaining = [i for i in indices if i not in routing_set]
    rephrasal_set = set(rng.sample(remaining, n_rephrasal))

    router_entries: list[ScriptEntry] = []
    rephrasal_entries: list[ScriptEntry] = []
    variation_entries: list[ScriptEntry] = []
    judge_entries: list[ScriptEntry] = []
    plans: list[dict[str, Any]] = []

    acronyms = sorted(_ACRONYM_EXPANSIONS)
    docs = list(corpus)
    for i in range(sessions):
        if i in routing_set:
            kind = "routing_error"
            query = f"how many carryover vacation days does site {i:04d} allow?"
            routed = ExpertId.HOLIDAYS  # wrong: policy questions belong to policies
            correct = ExpertId.POLICIES
            history: list[str] = []
        elif i in rephrasal_set:
            kind = "rephrasal_error"
            acronym = acronyms[i % len(acronyms)]
            expansion = _ACRONYM_EXPANSIONS[acronym]
            history = [f"tell me about workplace support groups {i:04d}"]
            query = f"what is the role of the {acronym} planning team {i:04d}?"
            routed = ExpertId.SHAREPOINT
            correct = ExpertId.SHAREPOINT
            bad_rephrase = f"{expansion} planning team role {i:04d}"
            rephrasal_entries.append(
                ScriptEntry(
                    task="rephrasal",
                    prompt=build_rephrase_prompt(history, query),
                    text=bad_rephrase,
                    latency_ms=12.0,
                )
            )
            variation_entries.append(
                ScriptEntry(
                    task="variations",
                    prompt=bad_rephrase,
                    text=json.dumps(
                        [f"{expansion} planning team {i:04d}", f"planning team role {i:04d}"]
                    ),
                    latency_ms=8.0,
                )
            )
        else:
            kind = "other_error"
            doc = docs[i % len(docs)]
            topic = " ".join(doc.body.split()[:3])
            query = f"tell me about {topic} {i:04d}"
            routed = ExpertId.SHAREPOINT
            correct = ExpertId.SHAREPOINT
            history = []
        router_entries.append(
            ScriptEntry(task="router", prompt=query, text=routed.value, latency_ms=9.0)
        )
        judge_prompt = build_judge_prompt(query, [judge_alias(routed)])
        if kind == "routing_error":
            verdict = (
                "Reasoning: This question is about company policy, so it should have "
                f"been sent to '{judge_alias(correct)}'.\nAnswer: NO"
            )
        else:
            verdict = "Reasoning: The selected expert matches the question domain.\nAnswer: YES"
        judge_entries.append(
            ScriptEntry(task="judge", prompt=judge_prompt, text=verdict, latency_ms=15.0)
        )
        plans.append(
            {
                "session_index": i,
                "kind": kind,
                "query": query,
                "history": history,
                "routed_expert": routed.value,
                "correct_expert": correct.value,
            }
        )

    synthesis_entries = []
    for doc in docs:
        prompt = build_synthesis_prompt(doc)
        topic = " ".join(doc.body.split()[:2])
        records = [
            {
                "Question": f"what does the {doc.title} say about {topic} (part {k})?",
                "Answer": f"see {doc.title}",
                "Thought": "synthetic fixture output",
                "Process": "I need to use the Enterprise Knowledge tool",
                "Action": "EnterpriseKnowledge",
                "Action Input": [f"{topic} details {k}", f"{doc.title.lower()} {topic} {k}"],
            }
            for k in range(3)
        ]
        synthesis_entries.append(
            ScriptEntry(
                task="synthesis", prompt=prompt, text=json.dumps(records), latency_ms=25.0
            )
        )

    scripts = [
        BackendScript(
            backend_id=SIM_BACKENDS["router"],
            entries=router_entries,
            fallbacks={"router": ExpertId.SHAREPOINT.value},
            default_latency_ms=9.0,
            seed=seed,
        ),
        BackendScript(
            backend_id=SIM_BACKENDS["rephrasal"],
            entries=rephrasal_entries,
            fallbacks={"rephrasal": "{last_line}"},
            default_latency_ms=12.0,
            seed=seed,
        ),
        BackendScript(
            backend_id=SIM_BACKENDS["variations"],
            entries=variation_entries,
            fallbacks={"variations": "{last_line}"},
            default_latency_ms=8.0,
            seed=seed,
        ),
        BackendScript(
            backend_id=SIM_BACKENDS["answer"],
            entries=[],
            fallbacks={"answer": "Here is a summary of what the documentation says."},
            default_latency_ms=30.0,
            seed=seed,
        ),
        BackendScript(
            backend_id=SIM_BACKENDS["judge"],
            entries=judge_entries,
            fallbacks={
                "judge": "Reasoning: routing looks consistent with the examples.\nAnswer: YES"
            },
            default_latency_ms=15.0,
            seed=seed,
        ),
        BackendScript(
            backend_id=SIM_BACKENDS["synthesis"],
            entries=synthesis_entries,
            default_latency_ms=25.0,
            seed=seed,
        ),
        BackendScript(
            backend_id=SIM_BACKENDS["regression_judge"],
            entries=[],
            fallbacks={
                "regression_judge": "Correctness: 4.2\nHelpfulness: 4.3\nConscientiousness: 4.1"
            },
            default_latency_ms=15.0,
            seed=seed,
        ),
    ]
    bindings = {task: backend_id for task, backend_id in SIM_BACKENDS.items()}
    return scripts, bindings, plans


def run_simulation(
    store_dir: str | Path,
    sessions: int,
    error_rate: float,
    seed: int,
) -> SimulationResult:
    """Populate ``store_dir`` with scripted sessions and companion files."""
    if sessions < 0:
        raise InvalidArgument("sessions must be >= 0")
    if not 0.0 <= error_rate <= 0.5:
        raise InvalidArgument("error rate must be in [0, 0.5]")
    root = Path(store_dir)
    root.mkdir(parents=True, exist_ok=True)

    corpus = _build_corpus()
    corpus_path = root / "corpus.jsonl"
    corpus.dump(corpus_path)

    scripts, bindings, plans = build_simulation_scripts(seed, sessions, error_rate, corpus)
    scripts_path = root / "scripts.json"
    dump_scripts_file(scripts_path, scripts, bindings)

    gateway = LlmGateway()
    for script in scripts:
        gateway.register_script(script)
    for task, backend_id in bindings.items():
        gateway.bind(task, backend_id)

    agent = RagAgent(gateway, AgentConfig())
    store = EventStore(root)
    monitor = Monitor(store, url_of=corpus.url_of)

    id_rng = random.Random(seed ^ 0x5EED)
    # Fixed epoch keeps same-seed runs byte-identical in trace content.
    base_time = datetime(2026, 1, 1, tzinfo=timezone.utc)
    result = SimulationResult(
        sessions=sessions,
        traces=0,
        negatives=0,
        store_dir=str(root),
        corpus_path=str(corpus_path),
        scripts_path=str(scripts_path),
        ground_truth_path=str(root / "ground_truth.json"),
        cycle_config_path=str(root / "cycle_config.json"),
    )

    for plan in plans:
        i = plan["session_index"]
        session_id = f"sim-{i:05d}"
        session_time = base_time + timedelta(seconds=60 * i)
        turn = 0
        for prior_turns in range(len(plan["history"])):
            warmup = agent.answer_query(
                session_id, turn, plan["history"][prior_turns], plan["history"][:prior_turns], corpus
            )
            warmup.trace_id = _deterministic_id(id_rng)
            warmup.timestamp = session_time + timedelta(seconds=5 * turn)
            monitor.record_response(warmup)
            result.traces += 1
            turn += 1
        trace = agent.answer_query(session_id, turn, plan["query"], plan["history"], corpus)
        trace.trace_id = _deterministic_id(id_rng)
        trace.timestamp = session_time + timedelta(seconds=5 * turn)
        monitor.record_response(trace)
        result.traces += 1

        reason = {
            "routing_error": "relevance",
            "rephrasal_error": "relevance",
            "other_error": "clarity_completeness",
        }[plan["kind"]]
        free_text = ""
        if i % 97 == 0:
            free_text = f"wrong answer, reach me at user{i}@example.com"
        monitor.record_feedback(
            trace_id=trace.trace_id,
            signal="down",
            reasons=[reason],
            free_text=free_text,
            timestamp=trace.timestamp + timedelta(seconds=30),
        )
        result.negatives += 1
        if plan["kind"] == "routing_error":
            result.routing_error_trace_ids.append(trace.trace_id)
        elif plan["kind"] == "rephrasal_error":
            result.rephrasal_error_trace_ids.append(trace.trace_id)
        plan["trace_id"] = trace.trace_id

    ground_truth = {
        "seed": seed,
        "sessions": sessions,
        "error_rate": error_rate,
        "routing_errors": [
            {
                "trace_id": plan["trace_id"],
                "session_index": plan["session_index"],
                "query": plan["query"],
                "routed_expert": plan["routed_expert"],
                "correct_expert": plan["correct_expert"],
            }
            for plan in plans
            if plan["kind"] == "routing_error"
        ],
        "rephrasal_errors": [
            {
                "trace_id": plan["trace_id"],
                "session_index": plan["session_index"],
                "query": plan["query"],
            }
            for plan in plans
            if plan["kind"] == "rephrasal_error"
        ],
    }
    with open(result.ground_truth_path, "w", encoding="utf-8") as fh:
        json.dump(ground_truth, fh, indent=2)

    cycle_config = {
        "store": ".",
        "corpus": "corpus.jsonl",
        "scripts": ["scripts.json"],
        "seed": seed,
        "min_examples_for_dataset": 10,
        "synthetic_target": 0,
    }
    with open(result.cycle_config_path, "w", encoding="utf-8") as fh:
        json.dump(cycle_config, fh, indent=2)

    store.close()
    return result
