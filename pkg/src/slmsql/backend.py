"""Text-generation backends and role routing.

Pipeline stages never talk to a model directly. They issue a
:class:`GenerationRequest` tagged with a :class:`ModelRole`, and the
:class:`ModelRouter` forwards it to whichever backend is bound to that role.
Binding both roles to one backend gives the single-model setting; binding
them separately gives the chat-model + SQL-model pairing.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Protocol, Sequence

import httpx

from .errors import BackendRejected, BackendUnavailable, InvalidConfig

log = logging.getLogger(__name__)

DEFAULT_MAX_IN_FLIGHT = 8
DEFAULT_MAX_RETRIES = 3


class ModelRole(str, Enum):
    CHAT = "chat"
    SQL = "sql"


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.2
    top_p: float = 0.8
    greedy: bool = False
    num_candidates: int = 1
    max_tokens: int = 512

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.num_candidates < 1:
            raise ValueError("num_candidates must be >= 1")

    @classmethod
    def greedy_decoding(cls, max_tokens: int = 768) -> "SamplingParams":
        return cls(temperature=0.0, top_p=1.0, greedy=True, num_candidates=1, max_tokens=max_tokens)

    @property
    def expected_outputs(self) -> int:
        return 1 if self.greedy else self.num_candidates


@dataclass(frozen=True)
class GenerationRequest:
    role: ModelRole
    system: str
    user: str
    sampling: SamplingParams = field(default_factory=SamplingParams)
    stage: str | None = None

    def __post_init__(self):
        if not self.system or not self.user:
            raise ValueError("system and user messages must be non-empty")


@dataclass(frozen=True)
class Completion:
    text: str
    finish_reason: str = "stop"
    latency: float = 0.0

    def __post_init__(self):
        if self.finish_reason not in ("stop", "length", "error"):
            raise ValueError(f"bad finish_reason {self.finish_reason!r}")
        if not self.text and self.finish_reason != "error":
            raise ValueError("empty completion text requires finish_reason='error'")


def make_completion(text: str, finish_reason: str = "stop", latency: float = 0.0) -> Completion:
    if not text:
        return Completion("", "error", latency)
    return Completion(text, finish_reason, latency)


class Backend(Protocol):
    def complete(self, request: GenerationRequest) -> list[Completion]: ...


@dataclass
class CallRecord:
    role: ModelRole
    stage: str | None
    requested: int
    returned: int
    attempts: int


class ScriptedBackend:
    """Deterministic backend replaying canned responses.

    A script is a list of rules. Each rule names a ``stage`` tag (a rule for
    ``generation`` also matches tags like ``generation/full_only``), and
    optionally a ``role`` and a ``match`` substring that must occur in the
    user prompt. The rule's ``responses`` are consumed one per call, the last
    one repeating once exhausted. A response is either a string (copied to
    every requested candidate) or a list of strings (cycled to length n).
    Requests no rule covers get ``default``; without a default they are
    rejected.
    """

    def __init__(self, rules: Sequence[dict] = (), default: str | list | None = None):
        self.rules = [dict(r) for r in rules]
        for i, rule in enumerate(self.rules):
            if "stage" not in rule or not rule.get("responses"):
                raise InvalidConfig(f"script rule {i} needs 'stage' and non-empty 'responses'")
        self.default = default
        self._ordinals = [0] * len(self.rules)
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfig(f"cannot read script {path}: {exc}") from exc
        if isinstance(data, list):
            data = {"rules": data}
        return cls(data.get("rules", []), data.get("default"))

    def _rule_for(self, request: GenerationRequest) -> int | None:
        tag = request.stage or ""
        for i, rule in enumerate(self.rules):
            stage = rule["stage"]
            if tag != stage and not tag.startswith(stage + "/"):
                continue
            if rule.get("role") and rule["role"] != request.role.value:
                continue
            if rule.get("match") and rule["match"] not in request.user:
                continue
            return i
        return None

    def complete(self, request: GenerationRequest) -> list[Completion]:
        with self._lock:
            idx = self._rule_for(request)
            if idx is None:
                if self.default is None:
                    raise BackendRejected(f"no scripted response for stage {request.stage!r}", 404)
                response = self.default
            else:
                responses = self.rules[idx]["responses"]
                response = responses[min(self._ordinals[idx], len(responses) - 1)]
                self._ordinals[idx] += 1
        n = request.sampling.expected_outputs
        texts = [response] * n if isinstance(response, str) else [response[i % len(response)] for i in range(n)]
        return [make_completion(t) for t in texts]


class FunctionBackend:
    """Backend wrapping a callable ``fn(request) -> str | list[str]``."""

    def __init__(self, fn: Callable[[GenerationRequest], str | list[str]]):
        self.fn = fn

    def complete(self, request: GenerationRequest) -> list[Completion]:
        out = self.fn(request)
        texts = [out] if isinstance(out, str) else list(out)
        return [make_completion(t) for t in texts]


class HttpBackend:
    """Client for OpenAI-compatible ``/v1/chat/completions`` servers."""

    def __init__(self, base_url: str, model: str, api_key: str | None = None, *,
                 timeout: float = 120.0, max_retries: int = DEFAULT_MAX_RETRIES,
                 backoff: float = 0.5, use_beam_search: bool = False,
                 client: httpx.Client | None = None):
        if not base_url or not model:
            raise InvalidConfig("http backend needs base_url and model")
        base = base_url.rstrip("/")
        self.url = base + ("/chat/completions" if base.endswith("/v1") else "/v1/chat/completions")
        self.model = model
        self.api_key = api_key
        self.max_retries = max_retries
        self.backoff = backoff
        self.use_beam_search = use_beam_search
        self.client = client or httpx.Client(timeout=timeout)
        self._multi_sample_ok = True
        self.last_attempts = 0

    def _payload(self, request: GenerationRequest, n: int) -> dict:
        s = request.sampling
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
            "temperature": 0.0 if s.greedy else s.temperature,
            "top_p": 1.0 if s.greedy else s.top_p,
            "n": n,
            "max_tokens": s.max_tokens,
        }
        if self.use_beam_search and n > 1:
            # vLLM extension; ignored by servers without beam support
            payload["use_beam_search"] = True
            payload["best_of"] = n
        return payload

    def _post(self, payload: dict) -> dict:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        attempts = 0
        while True:
            attempts += 1
            self.last_attempts = attempts
            try:
                resp = self.client.post(self.url, json=payload, headers=headers)
            except httpx.TransportError as exc:
                if attempts > self.max_retries:
                    raise BackendUnavailable(f"{self.url}: {exc} (after {attempts} attempts)") from exc
                time.sleep(self.backoff * 2 ** (attempts - 1))
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                if attempts > self.max_retries:
                    raise BackendUnavailable(
                        f"{self.url}: HTTP {resp.status_code} after {attempts} attempts: {resp.text[:500]}")
                time.sleep(self.backoff * 2 ** (attempts - 1))
                continue
            if resp.status_code >= 400:
                raise BackendRejected(f"HTTP {resp.status_code}: {resp.text}", resp.status_code)
            try:
                return resp.json()
            except ValueError as exc:
                raise BackendRejected(f"non-JSON response: {resp.text[:500]}", resp.status_code) from exc

    def _parse(self, body: dict, latency: float) -> list[Completion]:
        out = []
        for choice in body.get("choices", []):
            text = (choice.get("message") or {}).get("content") or ""
            reason = choice.get("finish_reason") or "stop"
            if reason not in ("stop", "length"):
                reason = "stop"
            out.append(make_completion(text, reason, latency))
        return out

    def complete(self, request: GenerationRequest) -> list[Completion]:
        n = request.sampling.expected_outputs
        if n > 1 and self._multi_sample_ok:
            start = time.monotonic()
            try:
                return self._parse(self._post(self._payload(request, n)), time.monotonic() - start)
            except BackendRejected as exc:
                if exc.status != 400:
                    raise
                log.warning("server rejected n=%d, falling back to repeated calls: %s", n, exc)
                self._multi_sample_ok = False
        out = []
        for _ in range(n):
            start = time.monotonic()
            out.extend(self._parse(self._post(self._payload(request, 1)), time.monotonic() - start))
        return out


def backend_from_config(config: dict, base_dir: Path | None = None) -> Backend:
    """Build a backend from ``{"type": "http"|"scripted", ...}``."""
    if not isinstance(config, dict):
        raise InvalidConfig(f"backend config must be an object, got {type(config).__name__}")
    kind = config.get("type", "http" if "base_url" in config else "scripted")
    if kind == "http":
        if not config.get("base_url") or not config.get("model"):
            raise InvalidConfig("http backend needs 'base_url' and 'model'")
        api_key = config.get("api_key") or os.environ.get(config.get("api_key_env", "OPENAI_API_KEY"))
        return HttpBackend(
            config["base_url"], config["model"], api_key,
            timeout=float(config.get("timeout", 120.0)),
            max_retries=int(config.get("max_retries", DEFAULT_MAX_RETRIES)),
            use_beam_search=bool(config.get("use_beam_search", False)),
        )
    if kind == "scripted":
        script = config.get("script")
        if script is None:
            raise InvalidConfig("scripted backend needs 'script'")
        if isinstance(script, (dict, list)):
            data = {"rules": script} if isinstance(script, list) else script
            return ScriptedBackend(data.get("rules", []), data.get("default"))
        path = Path(script)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return ScriptedBackend.from_file(path)
    raise InvalidConfig(f"unknown backend type {kind!r}")


class ModelRouter:
    """Routes requests to the backend bound for their role.

    Every call is appended to :attr:`calls` so tests and traces can check
    which role served which stage.
    """

    def __init__(self, max_in_flight: int = DEFAULT_MAX_IN_FLIGHT):
        self._backends: dict[ModelRole, Backend] = {}
        self._gates: dict[int, threading.BoundedSemaphore] = {}
        self.max_in_flight = max_in_flight
        self.calls: list[CallRecord] = []
        self._lock = threading.Lock()

    def bind(self, role: ModelRole | str, backend: Backend | dict, base_dir: Path | None = None) -> Backend:
        role = ModelRole(role)
        if isinstance(backend, dict):
            backend = backend_from_config(backend, base_dir)
        if not hasattr(backend, "complete"):
            raise InvalidConfig(f"not a backend: {backend!r}")
        self._backends[role] = backend
        with self._lock:
            self._gates.setdefault(id(backend), threading.BoundedSemaphore(self.max_in_flight))
        return backend

    def bound(self, role: ModelRole) -> Backend | None:
        return self._backends.get(role)

    @property
    def unified(self) -> bool:
        chat, sql = self._backends.get(ModelRole.CHAT), self._backends.get(ModelRole.SQL)
        return chat is not None and chat is sql

    def generate(self, request: GenerationRequest) -> list[Completion]:
        backend = self._backends.get(request.role)
        if backend is None:
            raise BackendUnavailable(f"no backend bound for role {request.role.value!r}")
        want = request.sampling.expected_outputs
        with self._gates[id(backend)]:
            out = list(backend.complete(request))
            calls = 1
            # servers may ignore n; top up with single-sample calls
            while len(out) < want and calls <= want:
                out.extend(backend.complete(replace(request, sampling=replace(request.sampling, num_candidates=1))))
                calls += 1
        if len(out) < want:
            raise BackendRejected(f"backend returned {len(out)} of {want} completions")
        attempts = getattr(backend, "last_attempts", 1) or 1
        with self._lock:
            self.calls.append(CallRecord(request.role, request.stage, want, len(out), attempts))
        return out[:want]
