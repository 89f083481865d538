"""Exception hierarchy shared across the flywheel components."""

from __future__ import annotations


class FlywheelError(Exception):
    """Base class for every error raised by this package."""

    code = "flywheel_error"


# --- agent / query pipeline ---------------------------------------------

class InvalidQuery(FlywheelError):
    code = "invalid_query"


class InvalidArgument(FlywheelError):
    code = "invalid_argument"


class EmptyCorpus(FlywheelError):
    code = "empty_corpus"


# --- llm gateway ----------------------------------------------------------

class GatewayError(FlywheelError):
    code = "gateway_error"


class NoBackend(GatewayError):
    code = "no_backend"


class ScriptedError(GatewayError):
    code = "scripted_error"


class RemoteError(GatewayError):
    code = "remote_error"


class DuplicateId(FlywheelError):
    code = "duplicate_id"


class UnknownBackend(FlywheelError):
    code = "unknown_backend"


# --- event store ----------------------------------------------------------

class StorageError(FlywheelError):
    code = "storage_error"


class LockHeld(FlywheelError):
    code = "lock_held"


# --- monitor ---------------------------------------------------------------

class ValidationError(FlywheelError):
    code = "validation_error"


class UnknownTrace(FlywheelError):
    code = "unknown_trace"


class InvalidReason(FlywheelError):
    code = "invalid_reason"


# --- analyzer ---------------------------------------------------------------

class EmptyTools(FlywheelError):
    code = "empty_tools"


class UnknownAlias(FlywheelError):
    code = "unknown_alias"


class MalformedVerdict(FlywheelError):
    code = "malformed_verdict"


class EmptyInput(FlywheelError):
    code = "empty_input"


# --- curation ---------------------------------------------------------------

class BadRatios(FlywheelError):
    code = "bad_ratios"


class EmptyDocument(FlywheelError):
    code = "empty_document"


class SchemaError(FlywheelError):
    code = "schema_error"


class ParseError(FlywheelError):
    code = "parse_error"


# --- rollout -----------------------------------------------------------------

class EmptyTestset(FlywheelError):
    code = "empty_testset"


class EmptyRegressionSet(FlywheelError):
    code = "empty_regression_set"


class MismatchedTestsets(FlywheelError):
    code = "mismatched_testsets"


class NotRolling(FlywheelError):
    code = "not_rolling"


class ApprovalPending(FlywheelError):
    code = "approval_pending"


# --- orchestrator -------------------------------------------------------------

class CycleInProgress(FlywheelError):
    code = "cycle_in_progress"


class InvalidInterval(FlywheelError):
    code = "invalid_interval"


# --- service surface -----------------------------------------------------------

class NotFound(FlywheelError):
    code = "not_found"


class Conflict(FlywheelError):
    code = "conflict"
