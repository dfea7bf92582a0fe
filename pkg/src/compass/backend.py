"""Language-model and embedding backends.

Two chat modes: ``live`` posts an OpenAI-style JSON payload to a configured
endpoint (bearer token read from an env var, checked at startup); ``scripted``
replays canned responses keyed by ``<stage>:<phase>:<trace_id>`` so the whole
pipeline runs bit-deterministically without network access. Embeddings follow
the same split: a remote endpoint, or a fixed FNV-1a token-hashing embedder.
"""

from __future__ import annotations

import json
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

import requests

from compass.errors import (
    BackendConfigError,
    EmbeddingUnavailableError,
    ScriptKeyError,
    ZeroVectorError,
)

RESPONSE_SCHEMA_TAGS = ("plan", "findings", "themes", "scores", "summary")

FINISH_COMPLETE = "complete"
FINISH_LENGTH = "length"
FINISH_REFUSAL = "refusal"
FINISH_TRANSPORT_ERROR = "transport_error"


@dataclass(frozen=True)
class Vector:
    """Fixed-length embedding vector."""

    values: tuple[float, ...]

    def __post_init__(self):
        if not self.values:
            raise ZeroVectorError("vector must have at least one component")

    @property
    def dim(self) -> int:
        return len(self.values)

    def norm(self) -> float:
        return math.sqrt(sum(v * v for v in self.values))

    def unit(self) -> "Vector":
        n = self.norm()
        if n == 0.0:
            raise ZeroVectorError("cannot normalize a zero vector")
        return Vector(tuple(v / n for v in self.values))

    def cosine(self, other: "Vector") -> float:
        if self.dim != other.dim:
            raise ValueError(f"dimension mismatch: {self.dim} vs {other.dim}")
        dot = sum(a * b for a, b in zip(self.values, other.values))
        denom = self.norm() * other.norm()
        return dot / denom if denom else 0.0


@dataclass(frozen=True)
class ChatRequest:
    system_text: str
    user_text: str
    response_schema_tag: str
    temperature: float = 0.2
    max_output_tokens: int = 2048
    # metadata used for scripted lookup and observability
    stage: str | None = None
    phase: str | None = None
    trace_id: str | None = None

    def __post_init__(self):
        if not self.user_text:
            raise ValueError("user_text must be non-empty")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")
        if not 0.0 <= self.temperature <= 1.0:
            raise ValueError("temperature must be in [0, 1]")
        if self.response_schema_tag not in RESPONSE_SCHEMA_TAGS:
            raise ValueError(f"unknown response_schema_tag {self.response_schema_tag!r}")

    def script_key(self) -> str:
        return f"{self.stage}:{self.phase}:{self.trace_id}"


@dataclass(frozen=True)
class ChatResult:
    text: str
    finish_reason: str
    latency_ms: int = 0


@dataclass
class BackendConfig:
    """Chat backend settings; construction validates, calls never re-check."""

    mode: str = "live"
    url: str | None = None
    model: str | None = None
    key_env: str = "COMPASS_API_KEY"
    timeout_s: float = 60.0
    max_attempts: int = 3
    backoff_base_s: float = 1.0
    in_flight_cap: int = 4
    script: dict[str, str] | None = None
    record_requests: bool = True
    sleep_fn: Callable[[float], None] = field(default=time.sleep, repr=False, compare=False)
    calls: list[ChatRequest] = field(default_factory=list, repr=False, compare=False)
    _gate: threading.Semaphore = field(init=False, repr=False, compare=False)
    _calls_lock: threading.Lock = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.mode not in ("live", "scripted"):
            raise BackendConfigError(f"unknown backend mode {self.mode!r}")
        if self.mode == "live":
            if not self.url or not self.model:
                raise BackendConfigError("live backend requires url and model")
            if not os.environ.get(self.key_env):
                raise BackendConfigError(
                    f"live backend requires the {self.key_env} environment variable"
                )
        else:
            if self.script is None:
                raise BackendConfigError("scripted backend requires a script")
            for key, value in self.script.items():
                if not isinstance(value, str) or not value:
                    raise BackendConfigError(f"scripted response for {key!r} must be non-empty text")
        if self.in_flight_cap < 1:
            raise BackendConfigError("in_flight_cap must be >= 1")
        self._gate = threading.Semaphore(self.in_flight_cap)
        self._calls_lock = threading.Lock()

    @property
    def backend_id(self) -> str:
        if self.mode == "scripted":
            return "scripted"
        return f"live:{self.model}"


def scripted_backend(script: Mapping[str, str], **kwargs) -> BackendConfig:
    """Build a deterministic backend replaying ``<stage>:<phase>:<trace_id>`` keys."""
    return BackendConfig(mode="scripted", script=dict(script), **kwargs)


def load_script(data: bytes) -> dict[str, str]:
    """Parse a script JSON object, rejecting duplicate keys."""

    def no_dupes(pairs):
        seen = {}
        for key, value in pairs:
            if key in seen:
                raise BackendConfigError(f"script key collision: {key!r}")
            seen[key] = value
        return seen

    payload = json.loads(data.decode("utf-8"), object_pairs_hook=no_dupes)
    if not isinstance(payload, dict):
        raise BackendConfigError("script file must be a JSON object")
    return {str(k): str(v) for k, v in payload.items()}


def chat_complete(config: BackendConfig, request: ChatRequest) -> ChatResult:
    """Run one chat call.

    Live mode posts ``{model, messages, temperature, max_tokens}`` and reads
    ``choices[0].message.content``; transport failures are retried with
    exponential backoff and surface as a ``transport_error`` result, never an
    exception. Scripted mode raises ScriptKeyError for unknown keys.
    """
    if config.record_requests:
        with config._calls_lock:
            config.calls.append(request)
    if config.mode == "scripted":
        key = request.script_key()
        assert config.script is not None
        if key not in config.script:
            raise ScriptKeyError(key)
        return ChatResult(text=config.script[key], finish_reason=FINISH_COMPLETE, latency_ms=0)
    return _live_chat(config, request)


def _live_chat(config: BackendConfig, request: ChatRequest) -> ChatResult:
    payload = {
        "model": config.model,
        "messages": [
            {"role": "system", "content": request.system_text},
            {"role": "user", "content": request.user_text},
        ],
        "temperature": request.temperature,
        "max_tokens": request.max_output_tokens,
    }
    headers = {"Authorization": f"Bearer {os.environ.get(config.key_env, '')}"}
    started = time.monotonic()
    with config._gate:
        for attempt in range(config.max_attempts):
            try:
                response = requests.post(
                    config.url, json=payload, headers=headers, timeout=config.timeout_s
                )
                if 200 <= response.status_code < 300:
                    body = response.json()
                    choice = body["choices"][0]
                    text = choice["message"]["content"] or ""
                    finish = choice.get("finish_reason", "stop")
                    reason = FINISH_LENGTH if finish == "length" else FINISH_COMPLETE
                    if not text:
                        reason = FINISH_REFUSAL
                    latency = int((time.monotonic() - started) * 1000)
                    return ChatResult(text=text, finish_reason=reason, latency_ms=latency)
            except (requests.RequestException, KeyError, IndexError, ValueError):
                pass
            if attempt < config.max_attempts - 1:
                config.sleep_fn(config.backoff_base_s * (2**attempt))
    latency = int((time.monotonic() - started) * 1000)
    return ChatResult(text="", finish_reason=FINISH_TRANSPORT_ERROR, latency_ms=latency)


# --- embeddings -------------------------------------------------------------

_FNV_OFFSET = 14695981039346656037
_FNV_PRIME = 1099511628211
_U64 = (1 << 64) - 1
_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash; fixed so embeddings are stable across platforms."""
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _U64
    return h


def hash_embed(text: str, dim: int) -> Vector:
    """Deterministic token-hashing embedding.

    Lowercase, split on non-alphanumerics, hash each token to a bucket in
    [0, dim) via FNV-1a 64-bit with a sign drawn from a second hash of the
    token, accumulate, then L2-normalize.
    """
    if dim < 8:
        raise ValueError("hash_embed requires dim >= 8")
    tokens = [t for t in _TOKEN_SPLIT.split(text.lower()) if t]
    if not tokens:
        raise ZeroVectorError("text produced no tokens to embed")
    values = [0.0] * dim
    for token in tokens:
        data = token.encode("utf-8")
        bucket = fnv1a64(data) % dim
        sign = 1.0 if fnv1a64(data + b"#") % 2 == 0 else -1.0
        values[bucket] += sign
    norm = math.sqrt(sum(v * v for v in values))
    if norm == 0.0:
        raise ZeroVectorError("token hashes cancelled to a zero vector")
    return Vector(tuple(v / norm for v in values))


@dataclass
class EmbedderConfig:
    mode: str = "hash"
    dim: int = 256
    url: str | None = None
    model: str | None = None
    key_env: str = "COMPASS_API_KEY"
    timeout_s: float = 30.0

    def __post_init__(self):
        if self.mode not in ("hash", "live"):
            raise BackendConfigError(f"unknown embedder mode {self.mode!r}")
        if self.mode == "hash" and self.dim < 8:
            raise BackendConfigError("hash embedder requires dim >= 8")
        if self.mode == "live" and (not self.url or not self.model):
            raise BackendConfigError("live embedder requires url and model")

    @property
    def embedder_id(self) -> str:
        return f"hash:{self.dim}" if self.mode == "hash" else f"live:{self.model}"


def embed(config: EmbedderConfig, text: str) -> Vector:
    """Embed text into a unit-norm Vector of the configured dimension."""
    if not text:
        raise ZeroVectorError("cannot embed empty text")
    if config.mode == "hash":
        return hash_embed(text, config.dim)
    headers = {"Authorization": f"Bearer {os.environ.get(config.key_env, '')}"}
    try:
        response = requests.post(
            config.url,
            json={"model": config.model, "input": text},
            headers=headers,
            timeout=config.timeout_s,
        )
        response.raise_for_status()
        raw = response.json()["data"][0]["embedding"]
        return Vector(tuple(float(v) for v in raw)).unit()
    except (requests.RequestException, KeyError, IndexError, TypeError, ValueError) as exc:
        raise EmbeddingUnavailableError(f"embedding endpoint failed: {exc}") from exc
