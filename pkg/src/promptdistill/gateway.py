"""Uniform access to chat-completion and embedding backends.

Four pluggable backend kinds keep every other module testable with zero
network access:

- ``http_chat`` / ``http_embed``: JSON-over-HTTP with bounded retries,
  exponential backoff, per-backend rate limiting, and an on-disk response
  cache.
- ``scripted_chat``: ordered (matcher, response) pairs over the user text.
- ``rule_chat``: a deterministic student simulator that applies the
  "If <condition> -> <label>" lines found in the system text to the user
  text, so prompt-sensitivity is exercisable offline.
- ``hash_embed``: seeded pseudo-random unit vectors keyed by the text digest,
  optionally bundled by a shared prefix for clustering fixtures.

HTTP chat protocol: POST {model, messages:[{role, content}...], temperature,
max_tokens} to endpoint_url; the reply text is the first choice's message
content. Embedding protocol: POST {model, input:[texts]} returning an ordered
vector list. API keys come exclusively from the environment variable named in
``auth_env_var``.

Cache key: digest of (backend_id, model_name, system_text, user_text,
temperature, max_output_tokens); the opaque ``extra_params`` map joins the key
only when non-empty. One file per key under ``cache_dir``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence, TypeVar

import httpx
import numpy as np

from .errors import (
    AuthMissing,
    ConfigError,
    DimensionMismatch,
    EmptyCompletion,
    GatewayError,
    RateLimited,
    ScriptExhausted,
    TransportError,
)
from .util import canonical_json, sha256_text

logger = logging.getLogger("promptdistill.gateway")

CHAT_KINDS = ("http_chat", "scripted_chat", "rule_chat")
EMBED_KINDS = ("http_embed", "hash_embed")
MOCK_KINDS = ("scripted_chat", "rule_chat", "hash_embed")
CHAT_ROLES = ("teacher", "synthesizer", "resolver", "student")


@dataclass(frozen=True)
class ChatRequest:
    system_text: str
    user_text: str
    temperature: float = 0.0
    max_output_tokens: int = 1024
    backend_role: str = "teacher"

    def __post_init__(self):
        if not (self.system_text or self.user_text):
            raise ConfigError("system_text and user_text are both empty")
        if not (0.0 <= self.temperature <= 2.0):
            raise ConfigError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_output_tokens < 1:
            raise ConfigError("max_output_tokens must be >= 1")
        if self.backend_role not in CHAT_ROLES:
            raise ConfigError(f"backend_role must be one of {CHAT_ROLES}")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_token_count: int
    output_token_count: int
    backend_id: str
    cached: bool = False


@dataclass(eq=False)
class EmbeddingVector:
    values: np.ndarray
    source_text_digest: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ConfigError("embedding contains non-finite values")

    @property
    def dimension(self) -> int:
        return int(self.values.shape[0])


@dataclass
class ScriptEntry:
    pattern: str
    response: str
    mode: str = "substring"  # or "full"

    def matches(self, user_text: str) -> bool:
        if self.mode == "full":
            return user_text == self.pattern
        return self.pattern in user_text


@dataclass
class BackendConfig:
    backend_id: str
    kind: str
    endpoint_url: str | None = None
    model_name: str | None = None
    auth_env_var: str | None = None
    max_retries: int = 2
    requests_per_minute: int = 0  # 0 = unlimited
    cache_dir: str | None = None
    temperature: float = 0.0
    max_output_tokens: int = 1024
    timeout_s: float = 60.0
    backoff_base_s: float = 0.5
    max_parallel: int = 8
    embedding_dim: int | None = None
    script: list[ScriptEntry] = field(default_factory=list)
    fallback_text: str = "UNDECIDED"
    bundle_delimiter: str | None = None
    bundle_jitter: float = 0.05
    extra_params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kind not in CHAT_KINDS + EMBED_KINDS:
            raise ConfigError(f"unknown backend kind {self.kind!r}")
        if self.kind.startswith("http"):
            if not self.endpoint_url or not self.model_name:
                raise ConfigError(f"{self.kind} backend requires endpoint_url and model_name")
        else:
            if self.endpoint_url or self.model_name:
                raise ConfigError(f"mock backend kind {self.kind!r} forbids endpoint_url/model_name")
        if self.kind == "http_embed" and not self.embedding_dim:
            raise ConfigError("http_embed backend must declare embedding_dim")
        if self.kind == "hash_embed" and self.embedding_dim is None:
            self.embedding_dim = 16
        if self.max_retries < 0 or self.requests_per_minute < 0:
            raise ConfigError("max_retries and requests_per_minute must be >= 0")
        if self.timeout_s <= 0 or self.max_parallel < 1:
            raise ConfigError("timeout_s must be > 0 and max_parallel >= 1")

    def to_dict(self) -> dict:
        d = {
            "backend_id": self.backend_id,
            "kind": self.kind,
            "endpoint_url": self.endpoint_url,
            "model_name": self.model_name,
            "auth_env_var": self.auth_env_var,
            "max_retries": self.max_retries,
            "requests_per_minute": self.requests_per_minute,
            "cache_dir": self.cache_dir,
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
            "timeout_s": self.timeout_s,
            "backoff_base_s": self.backoff_base_s,
            "max_parallel": self.max_parallel,
            "embedding_dim": self.embedding_dim,
            "script": [
                {"pattern": s.pattern, "response": s.response, "mode": s.mode} for s in self.script
            ],
            "fallback_text": self.fallback_text,
            "bundle_delimiter": self.bundle_delimiter,
            "bundle_jitter": self.bundle_jitter,
            "extra_params": dict(self.extra_params),
        }
        return d

    @staticmethod
    def from_dict(d: dict) -> "BackendConfig":
        script = [
            ScriptEntry(
                pattern=str(s["pattern"]),
                response=str(s["response"]),
                mode=str(s.get("mode", "substring")),
            )
            for s in d.get("script") or []
        ]
        return BackendConfig(
            backend_id=str(d["backend_id"]),
            kind=str(d["kind"]),
            endpoint_url=d.get("endpoint_url"),
            model_name=d.get("model_name"),
            auth_env_var=d.get("auth_env_var"),
            max_retries=int(d.get("max_retries", 2)),
            requests_per_minute=int(d.get("requests_per_minute", 0)),
            cache_dir=d.get("cache_dir"),
            temperature=float(d.get("temperature", 0.0)),
            max_output_tokens=int(d.get("max_output_tokens", 1024)),
            timeout_s=float(d.get("timeout_s", 60.0)),
            backoff_base_s=float(d.get("backoff_base_s", 0.5)),
            max_parallel=int(d.get("max_parallel", 8)),
            embedding_dim=d.get("embedding_dim"),
            script=script,
            fallback_text=str(d.get("fallback_text", "UNDECIDED")),
            bundle_delimiter=d.get("bundle_delimiter"),
            bundle_jitter=float(d.get("bundle_jitter", 0.05)),
            extra_params=dict(d.get("extra_params") or {}),
        )


def scripted_chat_backend(
    script: Sequence[tuple[str, str]] | Sequence[ScriptEntry],
    backend_id: str = "scripted",
    **kwargs,
) -> BackendConfig:
    """Build a scripted chat backend from ordered (matcher, response) pairs;
    the first matching entry answers, unmatched requests raise ScriptExhausted."""
    entries = [
        s if isinstance(s, ScriptEntry) else ScriptEntry(pattern=s[0], response=s[1])
        for s in script
    ]
    return BackendConfig(backend_id=backend_id, kind="scripted_chat", script=entries, **kwargs)


# --- shared gateway state: rate limiters, parallelism bounds, call counters ---

_state_lock = threading.Lock()
_buckets: dict[str, "_TokenBucket"] = {}
_semaphores: dict[str, threading.Semaphore] = {}
_transport_calls: dict[str, int] = {}


class _TokenBucket:
    """requests_per_minute token bucket; acquire() blocks until a token is free."""

    def __init__(self, rpm: int):
        self.rate = rpm / 60.0
        self.capacity = float(max(rpm, 1))
        self.tokens = self.capacity
        self.updated = time.monotonic()
        self.lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self.lock:
                now = time.monotonic()
                self.tokens = min(self.capacity, self.tokens + (now - self.updated) * self.rate)
                self.updated = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate if self.rate > 0 else 0.05
            time.sleep(min(wait, 0.1))


def _bucket(cfg: BackendConfig) -> _TokenBucket | None:
    if cfg.requests_per_minute <= 0:
        return None
    with _state_lock:
        bucket = _buckets.get(cfg.backend_id)
        if bucket is None:
            bucket = _TokenBucket(cfg.requests_per_minute)
            _buckets[cfg.backend_id] = bucket
        return bucket


def _semaphore(cfg: BackendConfig) -> threading.Semaphore:
    with _state_lock:
        sem = _semaphores.get(cfg.backend_id)
        if sem is None:
            sem = threading.Semaphore(cfg.max_parallel)
            _semaphores[cfg.backend_id] = sem
        return sem


def _count_call(cfg: BackendConfig) -> None:
    with _state_lock:
        _transport_calls[cfg.backend_id] = _transport_calls.get(cfg.backend_id, 0) + 1


def transport_calls(backend_id: str | None = None) -> int:
    """Number of non-cached backend dispatches since the last reset."""
    with _state_lock:
        if backend_id is not None:
            return _transport_calls.get(backend_id, 0)
        return sum(_transport_calls.values())


def reset_gateway_state() -> None:
    with _state_lock:
        _buckets.clear()
        _semaphores.clear()
        _transport_calls.clear()


# --- response cache ---

def _chat_cache_key(req: ChatRequest, cfg: BackendConfig) -> str:
    payload: dict[str, Any] = {
        "backend_id": cfg.backend_id,
        "model_name": cfg.model_name or "",
        "system_text": req.system_text,
        "user_text": req.user_text,
        "temperature": req.temperature,
        "max_output_tokens": req.max_output_tokens,
    }
    if cfg.extra_params:
        payload["extra_params"] = cfg.extra_params
    return sha256_text(canonical_json(payload))


def _cache_load(cfg: BackendConfig, key: str) -> dict | None:
    if not cfg.cache_dir:
        return None
    path = Path(cfg.cache_dir) / f"{key}.json"
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        logger.warning("discarding unreadable cache entry %s", path)
        return None


def _cache_store(cfg: BackendConfig, key: str, payload: dict) -> None:
    if not cfg.cache_dir:
        return
    cache_dir = Path(cfg.cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    tmp = cache_dir / f"{key}.json.tmp.{os.getpid()}.{threading.get_ident()}"
    tmp.write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")
    os.replace(tmp, cache_dir / f"{key}.json")


def _approx_tokens(text: str) -> int:
    return len(text.split())


# --- chat completion ---

def complete(req: ChatRequest, cfg: BackendConfig) -> ChatResponse:
    """Issue one chat completion. Identical (req, cfg) with caching enabled
    returns the stored response with cached=True and no backend dispatch."""
    if cfg.kind not in CHAT_KINDS:
        raise ConfigError(f"backend kind {cfg.kind!r} cannot serve chat completions")
    key = _chat_cache_key(req, cfg)
    hit = _cache_load(cfg, key)
    if hit is not None:
        return ChatResponse(
            text=hit["text"],
            prompt_token_count=int(hit["prompt_token_count"]),
            output_token_count=int(hit["output_token_count"]),
            backend_id=cfg.backend_id,
            cached=True,
        )

    with _semaphore(cfg):
        bucket = _bucket(cfg)
        if bucket is not None:
            bucket.acquire()
        _count_call(cfg)
        if cfg.kind == "scripted_chat":
            text = _scripted_answer(req, cfg)
            counts = (_approx_tokens(req.system_text + " " + req.user_text), _approx_tokens(text))
        elif cfg.kind == "rule_chat":
            text = _rule_following_answer(req, cfg)
            counts = (_approx_tokens(req.system_text + " " + req.user_text), _approx_tokens(text))
        else:
            text, counts = _http_chat(req, cfg)

    if not text.strip():
        raise EmptyCompletion(f"backend {cfg.backend_id!r} returned empty text")
    payload = {
        "text": text,
        "prompt_token_count": counts[0],
        "output_token_count": counts[1],
    }
    _cache_store(cfg, key, payload)
    return ChatResponse(
        text=text,
        prompt_token_count=counts[0],
        output_token_count=counts[1],
        backend_id=cfg.backend_id,
        cached=False,
    )


def _scripted_answer(req: ChatRequest, cfg: BackendConfig) -> str:
    for entry in cfg.script:
        if entry.matches(req.user_text):
            return entry.response
    raise ScriptExhausted(sha256_text(req.user_text)[:16])


_RULE_LINE = re.compile(r"^\s*(?:\d+\.\s*)?If\s+(?P<cond>.+?)\s+→\s+(?P<label>.+?)\s*$")
_QUOTED = re.compile(r"'([^']+)'")


def _rule_following_answer(req: ChatRequest, cfg: BackendConfig) -> str:
    """Apply system-prompt rules to the user text, first match wins.

    A rule line has the shape ``If <condition> → <label>``. When the condition
    quotes keywords ('like this'), any quoted keyword occurring in the user
    text fires the rule; otherwise the whole condition text is used as the
    needle. No rule firing yields the configured fallback text.
    """
    user = req.user_text.lower()
    for line in req.system_text.splitlines():
        m = _RULE_LINE.match(line)
        if not m:
            continue
        condition = m.group("cond")
        keywords = _QUOTED.findall(condition) or [condition]
        if any(k.lower() in user for k in keywords):
            return m.group("label")
    return cfg.fallback_text


def _auth_headers(cfg: BackendConfig) -> dict[str, str]:
    if not cfg.auth_env_var:
        return {}
    token = os.environ.get(cfg.auth_env_var)
    if not token:
        raise AuthMissing(cfg.auth_env_var)
    return {"Authorization": f"Bearer {token}"}


def _post_with_retries(cfg: BackendConfig, payload: dict) -> httpx.Response:
    """POST with bounded retries: 429 and 5xx and transport faults retry with
    exponentially growing sleeps; other statuses fail immediately."""
    headers = _auth_headers(cfg)
    attempts = cfg.max_retries + 1
    delay = cfg.backoff_base_s
    last_error: str = "no attempt made"
    rate_limited = False
    retry_after: float | None = None
    for attempt in range(1, attempts + 1):
        try:
            resp = httpx.post(
                cfg.endpoint_url, json=payload, headers=headers, timeout=cfg.timeout_s
            )
        except httpx.HTTPError as e:
            last_error = f"transport failure: {e}"
            rate_limited = False
            resp = None
        if resp is not None:
            if resp.status_code == 200:
                return resp
            if resp.status_code == 429:
                rate_limited = True
                retry_after = _parse_retry_after(resp)
                last_error = "rate limited (status 429)"
            elif resp.status_code >= 500:
                rate_limited = False
                last_error = f"server error (status {resp.status_code})"
            else:
                raise TransportError(
                    f"non-retryable status {resp.status_code} from {cfg.backend_id!r}", attempt
                )
        if attempt < attempts:
            sleep_for = delay if retry_after is None else max(delay, retry_after)
            time.sleep(sleep_for)
            delay *= 2
    if rate_limited:
        raise RateLimited(retry_after, attempts)
    raise TransportError(f"{last_error} from {cfg.backend_id!r}", attempts)


def _parse_retry_after(resp: httpx.Response) -> float | None:
    raw = resp.headers.get("Retry-After")
    if raw is None:
        return None
    try:
        return float(raw)
    except ValueError:
        return None


def _http_chat(req: ChatRequest, cfg: BackendConfig) -> tuple[str, tuple[int, int]]:
    messages = []
    if req.system_text:
        messages.append({"role": "system", "content": req.system_text})
    messages.append({"role": "user", "content": req.user_text})
    payload: dict[str, Any] = {
        "model": cfg.model_name,
        "messages": messages,
        "temperature": req.temperature,
        "max_tokens": req.max_output_tokens,
    }
    payload.update(cfg.extra_params)
    resp = _post_with_retries(cfg, payload)
    try:
        body = resp.json()
        text = body["choices"][0]["message"]["content"]
    except (json.JSONDecodeError, KeyError, IndexError, TypeError) as e:
        raise TransportError(f"malformed chat response from {cfg.backend_id!r}: {e}") from e
    usage = body.get("usage") or {}
    prompt_tokens = int(usage.get("prompt_tokens", _approx_tokens(req.system_text + req.user_text)))
    output_tokens = int(usage.get("completion_tokens", _approx_tokens(text or "")))
    if text is None or not str(text).strip():
        raise EmptyCompletion(f"backend {cfg.backend_id!r} returned an empty choice")
    return str(text), (prompt_tokens, output_tokens)


# --- embeddings ---

def embed_batch(texts: Sequence[str], cfg: BackendConfig) -> list[EmbeddingVector]:
    """Embed texts in order; output length equals input length and every vector
    has the backend's declared dimension. Batching is invisible: the result
    equals concatenating embed_batch over any partition of the input."""
    if cfg.kind not in EMBED_KINDS:
        raise ConfigError(f"backend kind {cfg.kind!r} cannot serve embeddings")
    if not texts:
        raise ConfigError("texts must be non-empty")
    if cfg.kind == "hash_embed":
        return [_hash_embedding(t, cfg) for t in texts]
    return _http_embed(list(texts), cfg)


def _seed_from_digest(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


def _unit_vector_for(text: str, dim: int) -> np.ndarray:
    rng = np.random.default_rng(_seed_from_digest(text))
    v = rng.standard_normal(dim)
    norm = float(np.linalg.norm(v))
    while norm == 0.0:  # astronomically unlikely; regenerate rather than divide by zero
        v = rng.standard_normal(dim)
        norm = float(np.linalg.norm(v))
    return v / norm


def _hash_embedding(text: str, cfg: BackendConfig) -> EmbeddingVector:
    dim = int(cfg.embedding_dim or 16)
    if cfg.bundle_delimiter and cfg.bundle_delimiter in text:
        # Prefix anchors a bundle center; the full-text digest adds small jitter
        # so bundle members are near-duplicates without being identical.
        prefix = text.split(cfg.bundle_delimiter, 1)[0]
        center = _unit_vector_for(prefix, dim)
        jitter = _unit_vector_for(text, dim)
        v = center + cfg.bundle_jitter * jitter
        v = v / float(np.linalg.norm(v))
    else:
        v = _unit_vector_for(text, dim)
    return EmbeddingVector(values=v, source_text_digest=sha256_text(text))


def _http_embed(texts: list[str], cfg: BackendConfig) -> list[EmbeddingVector]:
    with _semaphore(cfg):
        bucket = _bucket(cfg)
        if bucket is not None:
            bucket.acquire()
        _count_call(cfg)
        resp = _post_with_retries(cfg, {"model": cfg.model_name, "input": texts})
    try:
        body = resp.json()
    except json.JSONDecodeError as e:
        raise TransportError(f"malformed embedding response from {cfg.backend_id!r}") from e
    if isinstance(body, list):
        rows = body
    elif "data" in body:
        rows = [row["embedding"] for row in body["data"]]
    elif "embeddings" in body:
        rows = body["embeddings"]
    else:
        raise TransportError(f"unrecognized embedding response shape from {cfg.backend_id!r}")
    if len(rows) != len(texts):
        raise TransportError(
            f"embedding count mismatch from {cfg.backend_id!r}: sent {len(texts)}, got {len(rows)}"
        )
    out = []
    expected = int(cfg.embedding_dim)  # validated non-null for http_embed
    for text, row in zip(texts, rows):
        values = np.asarray(row, dtype=np.float64)
        if values.shape[0] != expected:
            raise DimensionMismatch(expected, int(values.shape[0]))
        out.append(EmbeddingVector(values=values, source_text_digest=sha256_text(text)))
    return out


# --- ordered fan-out ---

T = TypeVar("T")
R = TypeVar("R")


def map_with_backend(
    fn: Callable[[T], R], items: Sequence[T], cfg: BackendConfig
) -> list[R | Exception]:
    """Apply fn over items with up to cfg.max_parallel worker threads,
    returning results (or the raised exception) in input order."""
    if not items:
        return []
    results: list[R | Exception] = [None] * len(items)  # type: ignore[list-item]

    def _run(index: int, item: T) -> None:
        try:
            results[index] = fn(item)
        except Exception as e:  # collected, not raised: callers decide per item
            results[index] = e

    if cfg.max_parallel == 1 or len(items) == 1:
        for i, item in enumerate(items):
            _run(i, item)
        return results
    with ThreadPoolExecutor(max_workers=cfg.max_parallel) as pool:
        futures = [pool.submit(_run, i, item) for i, item in enumerate(items)]
        for f in futures:
            f.result()
    return results
