"""Chat-completion boundary: remote backend, scripted mock, record/replay cache.

Every backend exposes ``complete(ChatRequest) -> ChatResponse``.
"""

import hashlib
import json
import logging
import os
import re
import threading
import time
from collections import Counter, deque
from dataclasses import asdict, dataclass
from pathlib import Path

import openai
from openai import OpenAI

from utils.errors import (
    AuthFailure,
    BackendError,
    CacheMiss,
    ContextOverflow,
    NoRuleMatched,
    TransportExhausted,
    UsageError,
)
from utils.retry import api_retry

log = logging.getLogger(__name__)

DEFAULT_SYSTEM_TEXT = "You are an expert reasoning over a knowledge graph."
DEFAULT_CHAT_MODEL = "gpt-4-0613"
CACHE_MODES = ("record", "replay", "passthrough")


@dataclass(frozen=True)
class ChatRequest:
    system_text: str
    user_text: str
    temperature: float = 0.0
    max_output_tokens: int = 1024
    model_name: str = DEFAULT_CHAT_MODEL

    def __post_init__(self):
        if not self.user_text:
            raise UsageError("chat request needs non-empty user text")
        if self.temperature < 0:
            raise UsageError("temperature must be >= 0")

    def cache_key(self) -> str:
        """sha256 of the canonical request JSON; covers every field."""
        canonical = json.dumps(asdict(self), sort_keys=True, ensure_ascii=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChatResponse:
    text: str
    finish_state: str = "complete"
    usage: dict | None = None

    def to_dict(self) -> dict:
        return {"text": self.text, "finish_state": self.finish_state, "usage": self.usage}

    @classmethod
    def from_dict(cls, data: dict) -> "ChatResponse":
        return cls(data.get("text", ""), data.get("finish_state", "complete"), data.get("usage"))


@dataclass(frozen=True)
class ChatSettings:
    """Per-run request defaults."""

    model_name: str = DEFAULT_CHAT_MODEL
    temperature: float = 0.0
    max_output_tokens: int = 1024
    system_text: str = DEFAULT_SYSTEM_TEXT

    def request(self, user_text: str) -> ChatRequest:
        return ChatRequest(self.system_text, user_text, self.temperature, self.max_output_tokens, self.model_name)


def complete(backend, req: ChatRequest) -> ChatResponse:
    return backend.complete(req)


# -- Rate limiting --
class RateLimiter:
    """Sliding 60-second window shared by every worker."""

    def __init__(self, requests_per_minute: int | None, clock=time.monotonic, sleep=time.sleep, window=60.0):
        self.limit = requests_per_minute
        self.window = window
        self._clock = clock
        self._sleep = sleep
        self._issued: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if not self.limit:
            return
        with self._lock:
            while True:
                now = self._clock()
                while self._issued and now - self._issued[0] >= self.window:
                    self._issued.popleft()
                if len(self._issued) < self.limit:
                    self._issued.append(now)
                    return
                self._sleep(self._issued[0] + self.window - now)


# -- Remote backend --
class _Transient(BackendError):
    pass


_TRANSIENT = (
    openai.APIConnectionError,
    openai.APITimeoutError,
    openai.RateLimitError,
    openai.InternalServerError,
)


class OpenAIChatBackend:
    """OpenAI-compatible chat completions with retries and a shared rate limiter."""

    def __init__(self, base_url=None, api_key_env="GRAPH_AGENT_CHAT_API_KEY", rate_limiter=None,
                 max_retries=3, base_delay=1.0, client_factory=OpenAI, sleep=time.sleep, timeout=120.0):
        self.base_url = base_url
        self.api_key_env = api_key_env
        self.rate_limiter = rate_limiter or RateLimiter(None)
        self.max_retries = max_retries
        self.base_delay = base_delay
        self._client_factory = client_factory
        self._sleep = sleep
        self._timeout = timeout
        self._client = None
        self._lock = threading.Lock()

    def _get_client(self):
        with self._lock:
            if self._client is None:
                key = os.environ.get(self.api_key_env) or os.environ.get("OPENAI_API_KEY")
                if not key:
                    raise AuthFailure(f"chat API key not set (environment variable {self.api_key_env})")
                self._client = self._client_factory(api_key=key, base_url=self.base_url, timeout=self._timeout)
            return self._client

    def _attempt(self, client, req: ChatRequest):
        self.rate_limiter.acquire()
        try:
            return client.chat.completions.create(
                model=req.model_name,
                messages=[
                    {"role": "system", "content": req.system_text},
                    {"role": "user", "content": req.user_text},
                ],
                max_tokens=req.max_output_tokens,
                temperature=req.temperature,
            )
        except openai.AuthenticationError as e:
            raise AuthFailure(str(e)) from e
        except openai.BadRequestError as e:
            if "context_length" in str(getattr(e, "code", "") or "") or "context length" in str(e).lower():
                raise ContextOverflow(str(e)) from e
            raise BackendError(str(e)) from e
        except _TRANSIENT as e:
            raise _Transient(str(e)) from e

    def complete(self, req: ChatRequest) -> ChatResponse:
        client = self._get_client()
        try:
            resp = api_retry(
                self._attempt, client, req,
                retry_on=(_Transient,), max_retries=self.max_retries,
                base_delay=self.base_delay, sleep=self._sleep,
            )
        except _Transient as e:
            raise TransportExhausted(f"chat endpoint unreachable after {self.max_retries} attempts: {e}") from e
        choice = resp.choices[0]
        usage = None
        if getattr(resp, "usage", None) is not None:
            usage = {
                "prompt_tokens": resp.usage.prompt_tokens,
                "completion_tokens": resp.usage.completion_tokens,
            }
        return ChatResponse(
            text=choice.message.content or "",
            finish_state="truncated" if choice.finish_reason == "length" else "complete",
            usage=usage,
        )


# -- Scripted mock --
class ScriptedMock:
    """Ordered (matcher, response) rules; the first match answers.

    A matcher is ``"*"``, a substring of the user text, or a callable taking
    the request. A response is a string or a callable taking the request.
    """

    def __init__(self, rules):
        self.rules = list(rules)
        if not self.rules:
            raise UsageError("scripted mock needs at least one rule")
        self.calls: list[ChatRequest] = []
        self._lock = threading.Lock()

    @staticmethod
    def _matches(matcher, req: ChatRequest) -> bool:
        if callable(matcher):
            return bool(matcher(req))
        return matcher == "*" or matcher in req.user_text

    def complete(self, req: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls.append(req)
        for matcher, response in self.rules:
            if self._matches(matcher, req):
                text = response(req) if callable(response) else response
                return ChatResponse(text)
        raise NoRuleMatched(f"no scripted rule matched request {req.cache_key()[:12]}")


def scripted_mock(rules) -> ScriptedMock:
    if isinstance(rules, dict):
        rules = list(rules.items())
    return ScriptedMock(rules)


_LABEL_LINE = re.compile(r"^label: (.+)$", re.MULTILINE)


def majority_label(prompt: str) -> str | None:
    """Most frequent ``label:`` line in a prompt; ties go to the smaller label."""
    counts = Counter(m.strip() for m in _LABEL_LINE.findall(prompt))
    if not counts:
        return None
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]


def majority_label_mock() -> ScriptedMock:
    """Answers with the majority example label; used for end-to-end runs."""

    def reasons(req):
        label = majority_label(req.user_text)
        return f"1. Most examples share the category {label}." if label else ""

    def answer(req):
        label = majority_label(req.user_text)
        return f"Answer: {label}" if label else "I cannot decide."

    return ScriptedMock([
        ("List the reasons concisely.", reasons),
        ("*", answer),
    ])


# -- Record / replay --
class ReplayCache:
    """One JSON file per chat request or embedded text, under a content-addressed directory."""

    def __init__(self, directory, mode: str = "record"):
        if mode not in CACHE_MODES:
            raise UsageError(f"cache mode must be one of {CACHE_MODES}, got {mode!r}")
        self.directory = Path(directory)
        self.mode = mode
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def _path(self, key: str) -> Path:
        return self.directory / key[:2] / f"{key}.json"

    def load(self, key: str) -> dict | None:
        path = self._path(key)
        if not path.exists():
            with self._lock:
                self.misses += 1
            return None
        data = json.loads(path.read_text(encoding="utf-8"))
        with self._lock:
            self.hits += 1
        return data

    def save(self, key: str, entry: dict) -> None:
        path = self._path(key)
        payload = json.dumps(entry, indent=1, sort_keys=True)
        with self._lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_text(payload, encoding="utf-8")
            os.replace(tmp, path)

    def get(self, key: str) -> ChatResponse | None:
        data = self.load(key)
        return ChatResponse.from_dict(data["response"]) if data is not None else None

    def put(self, key: str, req: ChatRequest, resp: ChatResponse) -> None:
        self.save(key, {"request": asdict(req), "response": resp.to_dict()})


class CachedBackend:
    """Wrap a lazily built backend with a ReplayCache.

    In replay mode the inner backend (and so the network client) is never
    constructed.
    """

    def __init__(self, cache: ReplayCache, backend_factory):
        self.cache = cache
        self._factory = backend_factory
        self._inner = None
        self._lock = threading.Lock()

    def _backend(self):
        with self._lock:
            if self._inner is None:
                self._inner = self._factory()
            return self._inner

    def complete(self, req: ChatRequest) -> ChatResponse:
        key = req.cache_key()
        if self.cache.mode != "passthrough":
            hit = self.cache.get(key)
            if hit is not None:
                return hit
        if self.cache.mode == "replay":
            raise CacheMiss(f"no recorded response for request {key[:12]} (replay mode)")
        resp = self._backend().complete(req)
        if self.cache.mode == "record":
            self.cache.put(key, req, resp)
        return resp
