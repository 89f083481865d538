"""HTTP surface for chat, feedback, SME triage, rollout control and reports.

Every mutating endpoint appends to the event store; GETs never mutate. All
payloads are JSON and errors carry machine-readable codes.
"""

from __future__ import annotations

import logging
from typing import Any

from fastapi import Depends, FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .errors import (
    Conflict,
    FlywheelError,
    GatewayError,
    InvalidArgument,
    InvalidQuery,
    InvalidReason,
    NoBackend,
    NotFound,
    NotRolling,
    RemoteError,
    SchemaError,
    UnknownBackend,
    UnknownTrace,
)
from .orchestrator import Runtime
from .rollout import STAGE_SHADOW, assign_traffic
from .triage import STATUS_PENDING

logger = logging.getLogger(__name__)

_STATUS_BY_ERROR: tuple[tuple[type[FlywheelError], int], ...] = (
    (UnknownTrace, 404),
    (NotFound, 404),
    (Conflict, 409),
    (NotRolling, 409),
    (NoBackend, 503),
    (UnknownBackend, 503),
    (RemoteError, 503),
    (GatewayError, 503),
    (InvalidQuery, 400),
    (InvalidReason, 400),
    (InvalidArgument, 400),
    (SchemaError, 400),
)


def _status_for(error: FlywheelError) -> int:
    for kind, status in _STATUS_BY_ERROR:
        if isinstance(error, kind):
            return status
    return 500


class ChatRequest(BaseModel):
    session_id: str
    query: str
    history: list[str] = Field(default_factory=list)


class FeedbackRequest(BaseModel):
    trace_id: str
    signal: str
    reasons: list[str] = Field(default_factory=list)
    free_text: str = ""


class LabelRequest(BaseModel):
    expert: str | None = None
    rephrasals: list[str] | None = None
    dismiss: bool = False


def create_app(runtime: Runtime) -> FastAPI:
    app = FastAPI(title="flywheel", version="0.1.0")
    token = runtime.config.api_token

    async def require_auth(request: Request) -> None:
        if not token:
            return
        header = request.headers.get("authorization", "")
        if header != f"Bearer {token}":
            raise PermissionError("invalid bearer token")

    @app.exception_handler(FlywheelError)
    async def flywheel_error_handler(_: Request, exc: FlywheelError) -> JSONResponse:
        return JSONResponse(
            status_code=_status_for(exc),
            content={"error": {"code": exc.code, "message": str(exc)}},
        )

    @app.exception_handler(PermissionError)
    async def auth_error_handler(_: Request, exc: PermissionError) -> JSONResponse:
        return JSONResponse(
            status_code=401,
            content={"error": {"code": "unauthorized", "message": str(exc)}},
        )

    @app.exception_handler(RequestValidationError)
    async def validation_error_handler(
        _: Request, exc: RequestValidationError
    ) -> JSONResponse:
        return JSONResponse(
            status_code=400,
            content={"error": {"code": "invalid_body", "message": str(exc.errors())}},
        )

    def _backend_overrides(session_id: str) -> dict[str, str]:
        overrides: dict[str, str] = {}
        for task, state in runtime.rollout.all_states().items():
            try:
                variant_id = assign_traffic(session_id, state)
            except NotRolling:
                continue
            variant = runtime.rollout.get_variant(variant_id)
            if variant is not None:
                overrides[task] = variant.backend_id
        return overrides

    def _log_shadow_samples(session_id: str, trace_id: str, query: str, history: list[str]) -> None:
        """In shadow stage the candidate runs in parallel; its output is logged, never served."""
        for task, state in runtime.rollout.all_states().items():
            if state.stage != STAGE_SHADOW or state.candidate_variant is None:
                continue
            variant = runtime.rollout.get_variant(state.candidate_variant)
            if variant is None or task not in ("router", "rephrasal"):
                continue
            try:
                if task == "router":
                    expert, _ = runtime.agent.route(query, backend_id=variant.backend_id)
                    candidate_output = expert.value
                else:
                    candidate_output = runtime.agent.rephrase_conversational(
                        history, query, backend_id=variant.backend_id
                    )
            except FlywheelError as exc:
                candidate_output = f"error: {exc}"
            runtime.store.append(
                "report",
                {
                    "type": "shadow_sample",
                    "task": task,
                    "session_id": session_id,
                    "trace_id": trace_id,
                    "candidate_variant": state.candidate_variant,
                    "candidate_output": candidate_output,
                },
            )

    @app.post("/v1/chat", dependencies=[Depends(require_auth)])
    async def chat(body: ChatRequest) -> dict[str, Any]:
        if not body.query.strip():
            raise InvalidQuery("query must be non-blank")
        if runtime.corpus is None:
            raise NoBackend("no corpus loaded; chat is unavailable")
        if runtime.gateway.binding_for("router") is None:
            raise NoBackend("no router backend configured")
        overrides = _backend_overrides(body.session_id)
        trace = runtime.agent.answer_query(
            session_id=body.session_id,
            turn_index=len(body.history),
            query=body.query,
            history=body.history,
            corpus=runtime.corpus,
            backend_overrides=overrides,
        )
        runtime.monitor.record_response(trace)
        _log_shadow_samples(body.session_id, trace.trace_id, body.query, body.history)
        return {
            "trace_id": trace.trace_id,
            "response": trace.response_text,
            "citations": trace.citations,
            "followups": trace.followups,
        }

    @app.post("/v1/feedback", dependencies=[Depends(require_auth)], status_code=201)
    async def feedback(body: FeedbackRequest) -> dict[str, str]:
        event_id = runtime.monitor.record_feedback(
            trace_id=body.trace_id,
            signal=body.signal,
            reasons=body.reasons,
            free_text=body.free_text,
        )
        return {"feedback_id": event_id}

    @app.get("/v1/triage", dependencies=[Depends(require_auth)])
    async def triage_list(status: str = STATUS_PENDING) -> dict[str, Any]:
        items = runtime.triage.items(status=status if status != "all" else None)
        return {"items": [item.to_dict() for item in items]}

    @app.get("/v1/triage/{item_id}", dependencies=[Depends(require_auth)])
    async def triage_get(item_id: str) -> dict[str, Any]:
        item = runtime.triage.get(item_id)
        payload = item.to_dict()
        for event in runtime.store.scan("trace"):
            if event.payload.get("trace_id") == item.trace_id:
                payload["trace"] = event.payload
                break
        return payload

    @app.post("/v1/triage/{item_id}/label", dependencies=[Depends(require_auth)])
    async def triage_label(item_id: str, body: LabelRequest) -> dict[str, Any]:
        item = runtime.triage.label(
            item_id,
            sme_expert=body.expert,
            sme_rephrasals=body.rephrasals,
            dismiss=body.dismiss,
        )
        return item.to_dict()

    @app.get("/v1/rollouts", dependencies=[Depends(require_auth)])
    async def rollouts() -> dict[str, Any]:
        return {
            "rollouts": {
                task: state.to_dict() for task, state in runtime.rollout.all_states().items()
            }
        }

    @app.post("/v1/rollouts/{task}/approve", dependencies=[Depends(require_auth)])
    async def approve(task: str) -> dict[str, Any]:
        if runtime.rollout.state_for(task) is None:
            raise NotFound(f"no rollout state for task {task!r}")
        try:
            state = runtime.rollout.approve(task)
        except InvalidArgument as exc:
            raise Conflict(str(exc)) from None
        return state.to_dict()

    @app.post("/v1/rollouts/{task}/rollback", dependencies=[Depends(require_auth)])
    async def rollback(task: str) -> dict[str, Any]:
        if runtime.rollout.state_for(task) is None:
            raise NotFound(f"no rollout state for task {task!r}")
        state = runtime.rollout.rollback(task, reason="operator rollback via api")
        return state.to_dict()

    @app.get("/v1/datasets", dependencies=[Depends(require_auth)])
    async def datasets(task: str | None = None, limit: int = 5) -> dict[str, Any]:
        found = [
            event.payload
            for event in runtime.store.scan("dataset")
            if task is None or event.payload.get("task") == task
        ]
        return {"datasets": found[-max(1, limit):][::-1]}

    @app.get("/v1/reports/latest", dependencies=[Depends(require_auth)])
    async def latest_report() -> dict[str, Any]:
        for event in reversed(runtime.store.scan("report")):
            if event.payload.get("type") == "cycle_report":
                return event.payload
        raise NotFound("no cycle reports yet")

    @app.get("/v1/reports/{cycle_id}", dependencies=[Depends(require_auth)])
    async def report_by_id(cycle_id: str) -> dict[str, Any]:
        for event in reversed(runtime.store.scan("report")):
            if (
                event.payload.get("type") == "cycle_report"
                and event.payload.get("cycle_id") == cycle_id
            ):
                return event.payload
        raise NotFound(f"no cycle report {cycle_id!r}")

    @app.get("/v1/health")
    async def health() -> dict[str, str]:
        return {"status": "ok"}

    return app
