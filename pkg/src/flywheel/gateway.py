"""Single completion interface shared by every model-dependent operation.

Two backends exist: a deterministic scripted mock (table lookups keyed by a
normalized prompt, plus an accuracy dial for emulating imperfect models) and a
remote HTTP chat-completion backend. All latencies are recorded per call.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import httpx

from .errors import DuplicateId, NoBackend, RemoteError, ScriptedError, UnknownBackend
from .experts import ExpertId, parse_expert

# Tasks a completion request can belong to. Backends are bound per task.
TASKS = (
    "router",
    "rephrasal",
    "variations",
    "answer",
    "judge",
    "synthesis",
    "regression_judge",
)


def normalize_prompt(prompt: str) -> str:
    """Key normalization: trim, collapse internal whitespace, case-fold."""
    return " ".join(prompt.split()).casefold()


@dataclass(frozen=True)
class CompletionRequest:
    task: str
    prompt: str
    temperature: float = 0.0
    max_tokens: int = 1024
    seed: int = 0

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class CompletionResult:
    text: str
    latency_ms: float
    backend_id: str
    simulated: bool


@dataclass(frozen=True)
class ScriptEntry:
    """One keyed completion: the text to return and its simulated latency.

    ``error`` makes the lookup fail instead; ``wrong_text`` is what a dialed
    backend answers when this key falls in the incorrect fraction.
    """

    task: str
    prompt: str
    text: str
    latency_ms: float | None = None
    error: str | None = None
    wrong_text: str | None = None

    @property
    def key(self) -> tuple[str, str]:
        return (self.task, normalize_prompt(self.prompt))


@dataclass
class BackendScript:
    """Declarative behaviour of a scripted backend.

    ``accuracy_dials`` maps task -> fraction of that task's keyed entries
    answered with their correct text; the incorrect complement is chosen by an
    exact seeded selection, so ``floor(n * dial)`` answers are correct, not an
    expectation.  ``fallbacks`` maps task -> template applied when no entry
    matches; templates may reference ``{prompt}`` and ``{last_line}``.
    """

    backend_id: str
    entries: list[ScriptEntry] = field(default_factory=list)
    accuracy_dials: dict[str, float] = field(default_factory=dict)
    fallbacks: dict[str, str] = field(default_factory=dict)
    default_latency_ms: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        for task, dial in self.accuracy_dials.items():
            if not 0.0 <= dial <= 1.0:
                raise ValueError(f"accuracy dial for {task!r} out of [0, 1]: {dial}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "backend_id": self.backend_id,
            "seed": self.seed,
            "default_latency_ms": self.default_latency_ms,
            "accuracy_dials": dict(self.accuracy_dials),
            "fallbacks": dict(self.fallbacks),
            "entries": [
                {
                    "task": e.task,
                    "prompt": e.prompt,
                    "text": e.text,
                    "latency_ms": e.latency_ms,
                    "error": e.error,
                    "wrong_text": e.wrong_text,
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> BackendScript:
        return cls(
            backend_id=raw["backend_id"],
            seed=int(raw.get("seed", 0)),
            default_latency_ms=float(raw.get("default_latency_ms", 0.0)),
            accuracy_dials={k: float(v) for k, v in raw.get("accuracy_dials", {}).items()},
            fallbacks=dict(raw.get("fallbacks", {})),
            entries=[
                ScriptEntry(
                    task=e["task"],
                    prompt=e["prompt"],
                    text=e["text"],
                    latency_ms=e.get("latency_ms"),
                    error=e.get("error"),
                    wrong_text=e.get("wrong_text"),
                )
                for e in raw.get("entries", [])
            ],
        )


def _stable_rng(seed: int, label: str) -> random.Random:
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def derive_wrong_answer(text: str) -> str:
    """Deterministic off-target answer for a dialed-incorrect entry."""
    expert = parse_expert(text)
    if expert is not None:
        members = list(ExpertId)
        return members[(members.index(expert) + 1) % len(members)].value
    stripped = text.strip()
    if stripped.startswith("["):
        return json.dumps(["off-target rephrase", "unrelated keyword expansion"])
    return f"off-target: {text}"


class ScriptedBackend:
    """Deterministic mock backend driven by a :class:`BackendScript`.

    Referentially transparent: identical request + script + seed always yield
    the identical result. When ``sleep`` is true the simulated latency is also
    spent on the wall clock.
    """

    simulated = True

    def __init__(self, script: BackendScript, sleep: bool = False):
        self.script = script
        self.backend_id = script.backend_id
        self._sleep = sleep
        self._entries: dict[tuple[str, str], ScriptEntry] = {}
        for entry in script.entries:
            self._entries[entry.key] = entry
        # Exact seeded choice of which keyed items a dialed task answers
        # correctly: floor(n * dial) of the task's keys, not a coin flip each.
        self._correct_keys: dict[str, set[str]] = {}
        for task, dial in script.accuracy_dials.items():
            keys = sorted(k for t, k in self._entries if t == task)
            n_correct = math.floor(len(keys) * dial + 1e-9)
            rng = _stable_rng(script.seed, f"dial:{task}")
            self._correct_keys[task] = set(rng.sample(keys, n_correct))

    def complete(self, request: CompletionRequest) -> CompletionResult:
        entry = self._entries.get((request.task, normalize_prompt(request.prompt)))
        if entry is not None:
            if entry.error:
                raise ScriptedError(entry.error)
            latency = entry.latency_ms
            if latency is None:
                latency = self.script.default_latency_ms
            text = entry.text
            if request.task in self._correct_keys:
                if normalize_prompt(entry.prompt) not in self._correct_keys[request.task]:
                    text = entry.wrong_text or derive_wrong_answer(entry.text)
            if self._sleep and latency > 0:
                time.sleep(latency / 1000.0)
            return CompletionResult(
                text=text,
                latency_ms=float(latency),
                backend_id=self.backend_id,
                simulated=True,
            )
        template = self.script.fallbacks.get(request.task)
        if template is None:
            raise ScriptedError(
                f"no scripted entry for task {request.task!r} and no fallback configured"
            )
        lines = [line for line in request.prompt.splitlines() if line.strip()]
        text = template.format(prompt=request.prompt, last_line=lines[-1] if lines else "")
        return CompletionResult(
            text=text,
            latency_ms=self.script.default_latency_ms,
            backend_id=self.backend_id,
            simulated=True,
        )


@dataclass
class RemoteBackendConfig:
    base_url: str
    model: str = "default"
    api_key: str | None = None
    timeout_s: float = 30.0
    retries: int = 1

    @classmethod
    def from_env(cls, env: dict[str, str] | None = None) -> RemoteBackendConfig:
        env = dict(os.environ if env is None else env)
        base_url = env.get("FLYWHEEL_LLM_BASE_URL", "")
        if not base_url:
            raise RemoteError("FLYWHEEL_LLM_BASE_URL is not set")
        return cls(
            base_url=base_url,
            model=env.get("FLYWHEEL_LLM_MODEL", "default"),
            api_key=env.get("FLYWHEEL_LLM_TOKEN"),
        )


class RemoteBackend:
    """HTTP chat-completion backend.

    Issues one POST to ``{base_url}/chat/completions`` with a JSON body of
    ``model``, ``messages`` (single user message holding the prompt verbatim),
    ``temperature``, ``max_tokens`` and ``seed``; reads the completion text
    from ``choices[0].message.content``.
    """

    simulated = False

    def __init__(
        self,
        config: RemoteBackendConfig,
        backend_id: str = "remote",
        transport: httpx.BaseTransport | None = None,
    ):
        self.config = config
        self.backend_id = backend_id
        headers = {}
        if config.api_key:
            headers["Authorization"] = f"Bearer {config.api_key}"
        self._client = httpx.Client(
            base_url=config.base_url,
            headers=headers,
            timeout=config.timeout_s,
            transport=transport,
        )

    def complete(self, request: CompletionRequest) -> CompletionResult:
        body = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "seed": request.seed,
        }
        attempts = 1 + max(0, self.config.retries)
        last_error: Exception | None = None
        start = time.perf_counter()
        for _ in range(attempts):
            try:
                response = self._client.post("/chat/completions", json=body)
                response.raise_for_status()
                payload = response.json()
                text = payload["choices"][0]["message"]["content"]
                latency_ms = (time.perf_counter() - start) * 1000.0
                return CompletionResult(
                    text=text,
                    latency_ms=latency_ms,
                    backend_id=self.backend_id,
                    simulated=False,
                )
            except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
                last_error = exc
        raise RemoteError(f"remote completion failed: {last_error}")


class LlmGateway:
    """Registry of completion backends with per-task default bindings."""

    def __init__(self, sleep_simulated: bool = False):
        self._backends: dict[str, Any] = {}
        self._bindings: dict[str, str] = {}
        self._lock = threading.Lock()
        self._sleep_simulated = sleep_simulated

    def register_script(self, script: BackendScript) -> str:
        with self._lock:
            if script.backend_id in self._backends:
                raise DuplicateId(f"backend id already registered: {script.backend_id}")
            self._backends[script.backend_id] = ScriptedBackend(
                script, sleep=self._sleep_simulated
            )
        return script.backend_id

    def register_remote(self, config: RemoteBackendConfig, backend_id: str = "remote") -> str:
        with self._lock:
            if backend_id in self._backends:
                raise DuplicateId(f"backend id already registered: {backend_id}")
            self._backends[backend_id] = RemoteBackend(config, backend_id)
        return backend_id

    def bind(self, task: str, backend_id: str) -> None:
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        with self._lock:
            if backend_id not in self._backends:
                raise UnknownBackend(f"cannot bind unknown backend {backend_id!r}")
            self._bindings[task] = backend_id

    def has_backend(self, backend_id: str) -> bool:
        return backend_id in self._backends

    def binding_for(self, task: str) -> str | None:
        return self._bindings.get(task)

    def complete(self, request: CompletionRequest, backend_id: str | None = None) -> CompletionResult:
        target = backend_id or self._bindings.get(request.task)
        if target is None:
            raise NoBackend(f"no backend configured for task {request.task!r}")
        backend = self._backends.get(target)
        if backend is None:
            raise UnknownBackend(f"unknown backend {target!r}")
        return backend.complete(request)


def load_scripts_file(path: str | Path, gateway: LlmGateway) -> dict[str, str]:
    """Register every backend from a scripts JSON file and apply its bindings.

    Returns the binding map that was applied.
    """
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    for backend_raw in raw.get("backends", []):
        gateway.register_script(BackendScript.from_dict(backend_raw))
    bindings = {str(k): str(v) for k, v in raw.get("bindings", {}).items()}
    for task, backend_id in bindings.items():
        gateway.bind(task, backend_id)
    return bindings


def dump_scripts_file(
    path: str | Path, scripts: list[BackendScript], bindings: dict[str, str]
) -> None:
    payload = {
        "backends": [script.to_dict() for script in scripts],
        "bindings": dict(bindings),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, ensure_ascii=False, indent=2)
