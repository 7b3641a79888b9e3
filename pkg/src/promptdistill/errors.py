"""Exception hierarchy for the distillation pipeline.

Every raisable condition that callers are expected to branch on gets its own
class; transient conditions that the engine handles internally (single retry,
per-example failure capture) never escape as exceptions.
"""

from __future__ import annotations


class PipelineError(Exception):
    """Base class for all engine errors."""


class ConfigError(PipelineError):
    """Invalid configuration or violated call contract."""


# --- corpus ---

class MalformedRecord(PipelineError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class UnknownLabel(PipelineError):
    def __init__(self, example_id: str, label: str):
        super().__init__(f"example {example_id!r}: unknown label {label!r}")
        self.example_id = example_id
        self.label = label


class DuplicateId(PipelineError):
    def __init__(self, example_id: str):
        super().__init__(f"duplicate example_id {example_id!r}")
        self.example_id = example_id


class MissingField(PipelineError):
    def __init__(self, example_id: str, field: str):
        super().__init__(f"example {example_id!r}: missing or empty input field {field!r}")
        self.example_id = example_id
        self.field = field


class InsufficientExamples(PipelineError):
    def __init__(self, requested: int, available: int):
        super().__init__(f"requested {requested} examples, only {available} available")
        self.requested = requested
        self.available = available


# --- model gateway ---

class GatewayError(PipelineError):
    """Base class for transport-level failures."""


class TransportError(GatewayError):
    def __init__(self, message: str, attempts: int = 1):
        super().__init__(f"{message} (after {attempts} attempt(s))")
        self.attempts = attempts


class RateLimited(GatewayError):
    def __init__(self, retry_after: float | None, attempts: int):
        hint = f"retry-after {retry_after}s" if retry_after is not None else "no retry-after hint"
        super().__init__(f"rate limited after {attempts} attempt(s) ({hint})")
        self.retry_after = retry_after
        self.attempts = attempts


class AuthMissing(GatewayError):
    def __init__(self, env_var: str):
        super().__init__(f"environment variable {env_var!r} is not set")
        self.env_var = env_var


class EmptyCompletion(GatewayError):
    pass


class ScriptExhausted(GatewayError):
    def __init__(self, request_digest: str):
        super().__init__(f"no script entry matches request {request_digest}")
        self.request_digest = request_digest


class DimensionMismatch(PipelineError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"expected dimension {expected}, got {got}")
        self.expected = expected
        self.got = got


# --- extraction / parsing ---

class MissingPlaceholderValue(PipelineError):
    def __init__(self, name: str):
        super().__init__(f"no value supplied for placeholder {{{name}}}")
        self.name = name


class NoJsonFound(PipelineError):
    pass


class MissingKey(PipelineError):
    def __init__(self, name: str):
        super().__init__(f"required key {name!r} absent from model output")
        self.name = name


class EmptyRule(PipelineError):
    pass


class AbortedTooManyFailures(PipelineError):
    def __init__(self, failed: int, total: int, ceiling: float):
        super().__init__(
            f"{failed}/{total} examples failed extraction, above the {ceiling:.0%} ceiling"
        )
        self.failed = failed
        self.total = total
        self.ceiling = ceiling


# --- clustering ---

class ZeroVector(PipelineError):
    pass


# --- synthesis / resolution ---

class EmptyCluster(PipelineError):
    pass


class UnknownBranchLabel(PipelineError):
    def __init__(self, label: str):
        super().__init__(f"branch label {label!r} is not in the task label set")
        self.label = label


class NoFailures(PipelineError):
    pass


class EmptyRuleSet(PipelineError):
    pass


# --- evaluation ---

class UnknownExampleId(PipelineError):
    def __init__(self, example_id: str):
        super().__init__(f"prediction for unknown example_id {example_id!r}")
        self.example_id = example_id


class DuplicatePrediction(PipelineError):
    def __init__(self, example_id: str):
        super().__init__(f"duplicate prediction for example_id {example_id!r}")
        self.example_id = example_id


# --- run store ---

class IoError(PipelineError):
    """Filesystem-level failure while reading or writing run artifacts."""


class RunExists(PipelineError):
    def __init__(self, run_id: str):
        super().__init__(f"run {run_id!r} already exists")
        self.run_id = run_id


class RunLockHeld(IoError):
    def __init__(self, run_id: str):
        super().__init__(f"run {run_id!r} is locked by another writer")
        self.run_id = run_id


class CorruptManifest(PipelineError):
    pass


class NoReports(PipelineError):
    pass


class PhaseError(PipelineError):
    """A pipeline phase failed; the run directory keeps partial artifacts."""

    def __init__(self, phase: str, cause: Exception):
        super().__init__(f"phase {phase!r} failed: {cause}")
        self.phase = phase
        self.cause = cause
