"""Chat-completion backends: remote HTTP endpoints, a scripted mock, and replay.

Every logical completion call is recorded in an append-only trace ledger;
failed transport attempts are recorded separately so completion counts in
reports always equal ledger cardinality. A policy wrapper adds bounded
retries with exponential backoff, a per-minute request budget, and a
concurrency cap.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time as _time
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import requests

from .protocol import Message

logger = logging.getLogger("stepcheck.backend")

ROLE_GENERATOR = "generator"
ROLE_FEEDBACK = "feedback"
ROLE_CORRECTOR = "corrector"
ROLE_SUBJECT = "subject"
MODEL_ROLES = (ROLE_GENERATOR, ROLE_FEEDBACK, ROLE_CORRECTOR, ROLE_SUBJECT)

EXTENSION_FIELDS = ("top_k", "repetition_penalty")


class BackendError(Exception):
    """Base class for completion failures; may carry the attempt record."""

    def __init__(self, message: str, record: "TraceRecord | None" = None):
        super().__init__(message)
        self.record = record


class TransportError(BackendError):
    pass


class RateLimitedError(BackendError):
    pass


class RequestTimeout(BackendError):
    pass


class EndpointError(BackendError):
    def __init__(self, message: str, status: int, record: "TraceRecord | None" = None):
        super().__init__(message, record)
        self.status = status


class RetriesExhausted(BackendError):
    def __init__(self, message: str, last_error: BackendError):
        super().__init__(message, last_error.record)
        self.last_error = last_error


class ScriptExhausted(Exception):
    """Raised when a mock script has no matching rule left for a request."""


class ReplayMiss(Exception):
    """Raised when a replay backend has no recorded completion for a request."""


@dataclass(frozen=True)
class SamplingParams:
    """Decoding knobs for one completion call."""

    temperature: float = 0.0
    top_p: float = 1.0
    top_k: int | None = None
    repetition_penalty: float = 1.0
    max_tokens: int = 1024
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be a positive integer or None")
        if self.repetition_penalty <= 0:
            raise ValueError("repetition_penalty must be positive")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    def to_jsonable(self) -> dict:
        return {
            "temperature": self.temperature,
            "top_p": self.top_p,
            "top_k": self.top_k,
            "repetition_penalty": self.repetition_penalty,
            "max_tokens": self.max_tokens,
            "seed": self.seed,
        }


# stage defaults: deterministic direct reasoning; moderately diverse checking
# and correction; a hotter profile for sampling deliberately wrong paths
REASONING_PARAMS = SamplingParams(temperature=0.0, top_p=1.0, repetition_penalty=1.2)
CHECK_PARAMS = SamplingParams(
    temperature=0.5, top_p=0.85, top_k=30, repetition_penalty=1.2
)
CORRECTION_PARAMS = CHECK_PARAMS
GENERATION_PARAMS = SamplingParams(
    temperature=0.7, top_p=0.85, top_k=30, repetition_penalty=1.2
)


@dataclass(frozen=True)
class ModelRequest:
    """One chat-completion call: role-tagged messages plus sampling params."""

    messages: tuple[Message, ...]
    params: SamplingParams
    model_role: str
    n_samples: int = 1

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.messages[0].role != "system":
            raise ValueError("the first message must be a system message")
        if self.model_role not in MODEL_ROLES:
            raise ValueError(f"unknown model role {self.model_role!r}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")

    def last_human(self) -> str:
        for message in reversed(self.messages):
            if message.role == "human":
                return message.content
        return ""

    def digest(self) -> str:
        payload = {
            "messages": [[m.role, m.content] for m in self.messages],
            "params": self.params.to_jsonable(),
            "model_role": self.model_role,
            "n_samples": self.n_samples,
        }
        canonical = json.dumps(payload, sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def make_request(
    messages: Sequence[Message],
    params: SamplingParams,
    model_role: str,
    n_samples: int = 1,
) -> ModelRequest:
    return ModelRequest(tuple(messages), params, model_role, n_samples)


class Clock:
    """Injectable time source so policies and traces can be made deterministic."""

    def now(self) -> float:
        raise NotImplementedError

    def sleep(self, seconds: float) -> None:
        raise NotImplementedError


class SystemClock(Clock):
    def now(self) -> float:
        return _time.monotonic()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            _time.sleep(seconds)


class VirtualClock(Clock):
    """A clock that only moves when slept; sleeps are instantaneous."""

    def __init__(self, start: float = 0.0):
        self._now = start
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._now

    def sleep(self, seconds: float) -> None:
        with self._lock:
            if seconds > 0:
                self._now += seconds


@dataclass(frozen=True)
class TraceRecord:
    """One ledger entry: a completion or a failed attempt."""

    ordinal: int
    kind: str  # "completion" | "fault" | "probe"
    timestamp: float
    model_role: str
    request_digest: str
    params: dict
    messages: list[dict]
    completions: list[str]
    latency: float
    meta: dict = field(default_factory=dict)

    def to_jsonable(self) -> dict:
        return {
            "ordinal": self.ordinal,
            "kind": self.kind,
            "timestamp": self.timestamp,
            "model_role": self.model_role,
            "request_digest": self.request_digest,
            "params": self.params,
            "messages": self.messages,
            "completions": self.completions,
            "latency": self.latency,
            "meta": self.meta,
        }


class TraceLedger:
    """Thread-safe, append-only record of every backend interaction."""

    def __init__(self, path: str | Path | None = None):
        self._lock = threading.Lock()
        self._records: list[TraceRecord] = []
        self._path = Path(path) if path else None
        if self._path:
            self._path.parent.mkdir(parents=True, exist_ok=True)
            self._path.write_text("", encoding="utf-8")

    def append(
        self,
        kind: str,
        request: ModelRequest,
        completions: list[str],
        started: float,
        finished: float,
        meta: dict | None = None,
    ) -> TraceRecord:
        with self._lock:
            record = TraceRecord(
                ordinal=len(self._records),
                kind=kind,
                timestamp=started,
                model_role=request.model_role,
                request_digest=request.digest(),
                params=request.params.to_jsonable(),
                messages=[{"role": m.role, "content": m.content} for m in request.messages],
                completions=completions,
                latency=finished - started,
                meta=meta or {},
            )
            self._records.append(record)
            if self._path:
                with open(self._path, "a", encoding="utf-8") as handle:
                    handle.write(
                        json.dumps(record.to_jsonable(), ensure_ascii=False) + "\n"
                    )
            return record

    def records(self, kind: str | None = None) -> list[TraceRecord]:
        with self._lock:
            if kind is None:
                return list(self._records)
            return [r for r in self._records if r.kind == kind]

    def completion_count(self, model_role: str | None = None) -> int:
        return len(
            [
                r
                for r in self.records("completion")
                if model_role is None or r.model_role == model_role
            ]
        )


class Backend:
    """Interface: complete(request) -> list of n_samples completion texts."""

    ledger: TraceLedger

    def complete(self, request: ModelRequest) -> list[str]:
        raise NotImplementedError


@dataclass
class Fault:
    """A scripted failure: kind in {status, timeout, transport, rate-limit}."""

    kind: str
    status: int = 500

    def to_error(self, record: TraceRecord | None) -> BackendError:
        if self.kind == "timeout":
            return RequestTimeout("scripted timeout", record)
        if self.kind == "transport":
            return TransportError("scripted transport fault", record)
        if self.kind == "rate-limit":
            return RateLimitedError("scripted rate limit", record)
        return EndpointError(f"scripted status {self.status}", self.status, record)


@dataclass
class MockRule:
    """Match by model role, substrings of the last human message, or both.

    Faults are consumed first (in order), then replies are consumed
    n_samples at a time; a repeating rule cycles its replies forever.
    """

    replies: list[str] = field(default_factory=list)
    role: str | None = None
    contains: list[str] = field(default_factory=list)
    faults: list[Fault] = field(default_factory=list)
    repeat: bool = False
    _reply_cursor: int = 0
    _fault_cursor: int = 0

    def matches(self, request: ModelRequest) -> bool:
        if self.role is not None and request.model_role != self.role:
            return False
        if self.contains:
            human = request.last_human()
            if not all(needle in human for needle in self.contains):
                return False
        if self._fault_cursor < len(self.faults):
            return True
        if self.repeat and self.replies:
            return True
        return self._reply_cursor + 1 <= len(self.replies)

    @classmethod
    def from_jsonable(cls, record: dict) -> "MockRule":
        contains = record.get("contains", [])
        if isinstance(contains, str):
            contains = [contains]
        faults = [
            Fault(kind=f.get("kind", "status"), status=f.get("status", 500))
            for f in record.get("faults", [])
        ]
        return cls(
            replies=list(record.get("replies", [])),
            role=record.get("role"),
            contains=list(contains),
            faults=faults,
            repeat=bool(record.get("repeat", False)),
        )


class MockBackend(Backend):
    """Deterministic scripted backend; raises ScriptExhausted off-script.

    Uses a virtual clock by default so recorded timestamps are byte-stable
    across runs.
    """

    def __init__(
        self,
        rules: Sequence[MockRule],
        ledger: TraceLedger | None = None,
        clock: Clock | None = None,
        latency: float = 0.0,
        on_complete: Callable[[], None] | None = None,
    ):
        self.rules = list(rules)
        self.ledger = ledger or TraceLedger()
        self.clock = clock or VirtualClock()
        self.latency = latency
        self._lock = threading.Lock()
        self._on_complete = on_complete

    @classmethod
    def from_script_file(cls, path: str | Path, **kwargs) -> "MockBackend":
        with open(path, encoding="utf-8") as handle:
            script = json.load(handle)
        rules = [MockRule.from_jsonable(r) for r in script.get("rules", [])]
        return cls(rules, **kwargs)

    def complete(self, request: ModelRequest) -> list[str]:
        started = self.clock.now()
        with self._lock:
            rule = next((r for r in self.rules if r.matches(request)), None)
            if rule is None:
                self.ledger.append(
                    "fault", request, [], started, started, {"error": "script-exhausted"}
                )
                raise ScriptExhausted(
                    f"no scripted reply for role={request.model_role!r} "
                    f"human={request.last_human()[:80]!r}"
                )
            if rule._fault_cursor < len(rule.faults):
                fault = rule.faults[rule._fault_cursor]
                rule._fault_cursor += 1
                record = self.ledger.append(
                    "fault", request, [], started, started, {"fault": fault.kind}
                )
                raise fault.to_error(record)
            count = request.n_samples
            if rule.repeat:
                replies = [
                    rule.replies[(rule._reply_cursor + i) % len(rule.replies)]
                    for i in range(count)
                ]
                rule._reply_cursor += count
            else:
                if rule._reply_cursor + count > len(rule.replies):
                    raise ScriptExhausted(
                        f"rule has {len(rule.replies) - rule._reply_cursor} replies "
                        f"left but {count} were requested"
                    )
                replies = rule.replies[rule._reply_cursor : rule._reply_cursor + count]
                rule._reply_cursor += count
        if self.latency:
            self.clock.sleep(self.latency)
        finished = self.clock.now()
        self.ledger.append("completion", request, replies, started, finished)
        if self._on_complete:
            self._on_complete()
        return replies


class HttpBackend(Backend):
    """Chat-completion over HTTP with a one-time honored-sampling-field probe.

    The endpoint is probed once with the extension fields (top_k,
    repetition_penalty); if it rejects them the client drops the fields and
    warns, because those knobs materially affect reproduction claims.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        ledger: TraceLedger | None = None,
        clock: Clock | None = None,
        timeout: float = 60.0,
        session: requests.Session | None = None,
        probe: bool = True,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.ledger = ledger or TraceLedger()
        self.clock = clock or SystemClock()
        self.timeout = timeout
        self.session = session or requests.Session()
        self._probe_enabled = probe
        self._honored: set[str] | None = None
        self._probe_lock = threading.Lock()

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _payload(self, request: ModelRequest, honored: set[str]) -> dict:
        wire_roles = {"system": "system", "human": "user", "assistant": "assistant"}
        payload = {
            "model": self.model,
            "messages": [
                {"role": wire_roles[m.role], "content": m.content}
                for m in request.messages
            ],
            "temperature": request.params.temperature,
            "top_p": request.params.top_p,
            "max_tokens": request.params.max_tokens,
            "n": request.n_samples,
        }
        if request.params.seed is not None:
            payload["seed"] = request.params.seed
        if "top_k" in honored and request.params.top_k is not None:
            payload["top_k"] = request.params.top_k
        if "repetition_penalty" in honored:
            payload["repetition_penalty"] = request.params.repetition_penalty
        return payload

    def _post(self, payload: dict) -> requests.Response:
        try:
            return self.session.post(
                f"{self.base_url}/chat/completions",
                json=payload,
                headers=self._headers(),
                timeout=self.timeout,
            )
        except requests.Timeout as exc:
            raise RequestTimeout(str(exc)) from exc
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc

    def honored_fields(self) -> set[str]:
        """Probe once which sampling fields the endpoint accepts."""
        with self._probe_lock:
            if self._honored is not None:
                return self._honored
            if not self._probe_enabled:
                self._honored = set(EXTENSION_FIELDS)
                return self._honored
            probe_request = make_request(
                [Message("system", "probe"), Message("human", "ping")],
                SamplingParams(max_tokens=1, top_k=1, repetition_penalty=1.0),
                ROLE_SUBJECT,
            )
            started = self.clock.now()
            response = self._post(self._payload(probe_request, set(EXTENSION_FIELDS)))
            if response.status_code in (400, 422):
                fallback = self._post(self._payload(probe_request, set()))
                if fallback.ok:
                    self._honored = set()
                    logger.warning(
                        "endpoint %s rejects sampling fields %s; they will be "
                        "dropped, which may hurt reproducibility",
                        self.base_url,
                        ", ".join(EXTENSION_FIELDS),
                    )
                else:
                    raise EndpointError(
                        f"probe failed with status {fallback.status_code}",
                        fallback.status_code,
                    )
            elif response.ok:
                self._honored = set(EXTENSION_FIELDS)
            else:
                raise EndpointError(
                    f"probe failed with status {response.status_code}",
                    response.status_code,
                )
            self.ledger.append(
                "probe",
                probe_request,
                [],
                started,
                self.clock.now(),
                {"honored": sorted(self._honored)},
            )
            return self._honored

    def complete(self, request: ModelRequest) -> list[str]:
        honored = self.honored_fields()
        started = self.clock.now()
        try:
            response = self._post(self._payload(request, honored))
        except BackendError as exc:
            record = self.ledger.append(
                "fault", request, [], started, self.clock.now(), {"error": str(exc)}
            )
            exc.record = record
            raise
        if response.status_code == 429:
            record = self.ledger.append(
                "fault", request, [], started, self.clock.now(), {"status": 429}
            )
            raise RateLimitedError("rate limited", record)
        if not response.ok:
            record = self.ledger.append(
                "fault",
                request,
                [],
                started,
                self.clock.now(),
                {"status": response.status_code},
            )
            raise EndpointError(
                f"endpoint returned {response.status_code}",
                response.status_code,
                record,
            )
        body = response.json()
        completions = [
            choice["message"]["content"] for choice in body.get("choices", [])
        ]
        if len(completions) != request.n_samples:
            record = self.ledger.append(
                "fault",
                request,
                [],
                started,
                self.clock.now(),
                {"error": f"expected {request.n_samples} choices, got {len(completions)}"},
            )
            raise EndpointError("malformed completion payload", 200, record)
        meta = {}
        if isinstance(body.get("usage"), dict):
            meta["usage"] = body["usage"]
        self.ledger.append(
            "completion", request, completions, started, self.clock.now(), meta
        )
        return completions


class ReplayBackend(Backend):
    """Serve previously recorded completions keyed by request digest."""

    def __init__(self, records: Sequence[TraceRecord], clock: Clock | None = None):
        self.ledger = TraceLedger()
        self.clock = clock or VirtualClock()
        self._lock = threading.Lock()
        self._queues: dict[str, deque[list[str]]] = {}
        for record in records:
            if record.kind == "completion":
                self._queues.setdefault(record.request_digest, deque()).append(
                    list(record.completions)
                )

    @classmethod
    def from_trace_file(cls, path: str | Path) -> "ReplayBackend":
        records = []
        with open(path, encoding="utf-8") as handle:
            for line in handle:
                line = line.strip()
                if not line:
                    continue
                raw = json.loads(line)
                records.append(
                    TraceRecord(
                        ordinal=raw["ordinal"],
                        kind=raw["kind"],
                        timestamp=raw["timestamp"],
                        model_role=raw["model_role"],
                        request_digest=raw["request_digest"],
                        params=raw["params"],
                        messages=raw["messages"],
                        completions=raw["completions"],
                        latency=raw["latency"],
                        meta=raw.get("meta", {}),
                    )
                )
        return cls(records)

    def complete(self, request: ModelRequest) -> list[str]:
        digest = request.digest()
        started = self.clock.now()
        with self._lock:
            queue = self._queues.get(digest)
            if not queue:
                raise ReplayMiss(f"no recorded completion for digest {digest[:12]}")
            completions = queue.popleft()
        self.ledger.append("completion", request, completions, started, started)
        return completions


@dataclass(frozen=True)
class BackendPolicy:
    """Retry, backoff, concurrency, and request-budget limits."""

    max_retries: int = 3
    backoff_base: float = 0.5
    backoff_factor: float = 2.0
    backoff_max: float = 30.0
    max_concurrent: int = 4
    requests_per_minute: int | None = None
    timeout: float = 60.0

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1")
        if self.requests_per_minute is not None and self.requests_per_minute < 1:
            raise ValueError("requests_per_minute must be >= 1")

    def backoff(self, attempt: int) -> float:
        return min(self.backoff_base * self.backoff_factor**attempt, self.backoff_max)


def _is_retryable(error: BackendError) -> bool:
    if isinstance(error, (TransportError, RateLimitedError, RequestTimeout)):
        return True
    if isinstance(error, EndpointError):
        return error.status >= 500
    return False


class PolicyBackend(Backend):
    """Wrap a backend with retries, backoff, budget, and a concurrency cap.

    Retries apply only to transport, timeout, rate-limit, and 5xx outcomes;
    well-formed completions and client errors are never retried.
    """

    def __init__(self, inner: Backend, policy: BackendPolicy, clock: Clock | None = None):
        self.inner = inner
        self.policy = policy
        self.clock = clock or getattr(inner, "clock", None) or SystemClock()
        self._semaphore = threading.BoundedSemaphore(policy.max_concurrent)
        self._budget_lock = threading.Lock()
        self._recent: deque[float] = deque()
        self._inflight = 0
        self._inflight_lock = threading.Lock()
        self.max_inflight_seen = 0

    @property
    def ledger(self) -> TraceLedger:  # type: ignore[override]
        return self.inner.ledger

    def _respect_budget(self) -> None:
        if self.policy.requests_per_minute is None:
            return
        while True:
            with self._budget_lock:
                now = self.clock.now()
                while self._recent and self._recent[0] <= now - 60.0:
                    self._recent.popleft()
                if len(self._recent) < self.policy.requests_per_minute:
                    self._recent.append(now)
                    return
                wait = self._recent[0] + 60.0 - now
            self.clock.sleep(wait)

    def complete(self, request: ModelRequest) -> list[str]:
        with self._semaphore:
            with self._inflight_lock:
                self._inflight += 1
                self.max_inflight_seen = max(self.max_inflight_seen, self._inflight)
            try:
                return self._complete_with_retries(request)
            finally:
                with self._inflight_lock:
                    self._inflight -= 1

    def _complete_with_retries(self, request: ModelRequest) -> list[str]:
        last_error: BackendError | None = None
        for attempt in range(self.policy.max_retries + 1):
            self._respect_budget()
            try:
                return self.inner.complete(request)
            except BackendError as error:
                if not _is_retryable(error):
                    raise
                last_error = error
                if attempt < self.policy.max_retries:
                    self.clock.sleep(self.policy.backoff(attempt))
        assert last_error is not None
        raise RetriesExhausted(
            f"gave up after {self.policy.max_retries} retries: {last_error}",
            last_error,
        )


def complete_with_policy(
    backend: Backend,
    request: ModelRequest,
    policy: BackendPolicy,
    clock: Clock | None = None,
) -> list[str]:
    """One-shot policy-enforced completion (see PolicyBackend for batches)."""
    return PolicyBackend(backend, policy, clock).complete(request)
