"""Chat endpoint access, scripted replay, and the exchange transcript store.

The wire protocol is the common chat-completions shape: POST a JSON body of
``{model, messages, temperature, max_tokens}`` and read the first choice's
message content. Any server speaking that protocol works. A scripted backend
replays canned responses keyed by a fingerprint of the prompt text so whole
pipeline runs can be reproduced byte for byte with no network access.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import requests

from .errors import (
    ContextOverflowError,
    DataFormatError,
    ExhaustedRetriesError,
    MalformedResponseError,
    TransientBackendError,
    UnknownTranscriptIdError,
)
from .schema import LlmConfig

log = logging.getLogger(__name__)

API_KEY_ENV_VAR = "CTLABELER_API_KEY"

DEFAULT_SCRIPT_FALLBACK = (
    "I cannot answer this question; it is not part of my script."
)

# Backoff before retry attempt k (1-based) is _BACKOFF_BASE_S * 2**(k-1).
_BACKOFF_BASE_S = 0.5

_OVERFLOW_MARKERS = re.compile(
    r"context[ _]length|maximum context|context window|too many tokens|prompt is too long",
    re.IGNORECASE,
)


def fingerprint_messages(messages: Sequence[Mapping[str, str]]) -> str:
    """Stable hash of the message texts (roles and contents only).

    Deliberately ignores model name, temperature, and other configuration so
    a script recorded once replays under any config.
    """
    hasher = hashlib.sha256()
    for message in messages:
        hasher.update(message["role"].encode("utf-8"))
        hasher.update(b"\x1f")
        hasher.update(message["content"].encode("utf-8"))
        hasher.update(b"\x1e")
    return hasher.hexdigest()


@dataclass(frozen=True)
class CompletionResult:
    """Raw backend output before retry accounting."""

    text: str
    prompt_tokens: int | None = None
    completion_tokens: int | None = None


@dataclass(frozen=True)
class ChatExchange:
    """One prompt/response pair, with usage and retry metadata."""

    messages: tuple[tuple[str, str], ...]
    response: str
    prompt_tokens: int | None
    completion_tokens: int | None
    latency_s: float
    attempt: int

    def message_dicts(self) -> list[dict]:
        return [{"role": role, "content": content} for role, content in self.messages]

    def to_json_dict(self) -> dict:
        return {
            "messages": [
                {"role": role, "content": content} for role, content in self.messages
            ],
            "response": self.response,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "latency_s": self.latency_s,
            "attempt": self.attempt,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "ChatExchange":
        return cls(
            messages=tuple(
                (m["role"], m["content"]) for m in data.get("messages", ())
            ),
            response=data["response"],
            prompt_tokens=data.get("prompt_tokens"),
            completion_tokens=data.get("completion_tokens"),
            latency_s=data.get("latency_s", 0.0),
            attempt=data.get("attempt", 1),
        )


class ChatBackend(Protocol):
    """Anything that can answer one chat prompt."""

    def complete(
        self, messages: Sequence[Mapping[str, str]], config: LlmConfig
    ) -> CompletionResult: ...


class HttpChatBackend:
    """Talks to a chat-completions endpoint over HTTP.

    The endpoint URL comes from the config; a base URL gets
    ``/chat/completions`` appended, a full path is used as given. The bearer
    token is read from the ``CTLABELER_API_KEY`` environment variable unless
    passed explicitly.
    """

    def __init__(
        self,
        api_key: str | None = None,
        timeout_s: float = 120.0,
        session: requests.Session | None = None,
    ):
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV_VAR)
        self.timeout_s = timeout_s
        self._session = session or requests.Session()

    @staticmethod
    def _resolve_url(endpoint_url: str) -> str:
        url = endpoint_url.rstrip("/")
        if not url:
            raise ValueError("endpoint_url is empty")
        if not url.endswith("/chat/completions"):
            url = f"{url}/chat/completions"
        return url

    def complete(
        self, messages: Sequence[Mapping[str, str]], config: LlmConfig
    ) -> CompletionResult:
        payload = {
            "model": config.model_name,
            "messages": [
                {"role": m["role"], "content": m["content"]} for m in messages
            ],
            "temperature": config.temperature,
            "max_tokens": config.max_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            response = self._session.post(
                self._resolve_url(config.endpoint_url),
                json=payload,
                headers=headers,
                timeout=self.timeout_s,
            )
        except requests.RequestException as exc:
            raise TransientBackendError(f"request failed: {exc}") from exc
        if response.status_code >= 500 or response.status_code == 429:
            raise TransientBackendError(
                f"endpoint returned HTTP {response.status_code}"
            )
        body_text = response.text
        if response.status_code != 200:
            if _OVERFLOW_MARKERS.search(body_text):
                raise ContextOverflowError(
                    f"endpoint rejected the prompt as too long: HTTP {response.status_code}"
                )
            raise MalformedResponseError(
                f"endpoint returned HTTP {response.status_code}: {body_text[:200]}"
            )
        try:
            data = response.json()
        except ValueError as exc:
            raise MalformedResponseError(f"response body is not JSON: {exc}") from exc
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError(
                f"response JSON lacks choices[0].message.content: {json.dumps(data)[:200]}"
            ) from exc
        if not isinstance(text, str):
            raise MalformedResponseError("message content is not a string")
        usage = data.get("usage") or {}
        return CompletionResult(
            text=text,
            prompt_tokens=usage.get("prompt_tokens"),
            completion_tokens=usage.get("completion_tokens"),
        )


class ScriptedBackend:
    """Replays canned responses keyed by prompt fingerprint.

    Unknown prompts get a fixed fallback refusal so a miss surfaces
    downstream as a parse failure instead of silently inventing content.
    """

    def __init__(
        self,
        responses: Mapping[str, str] | None = None,
        fallback: str = DEFAULT_SCRIPT_FALLBACK,
    ):
        self.responses = dict(responses or {})
        self.fallback = fallback

    def complete(
        self, messages: Sequence[Mapping[str, str]], config: LlmConfig
    ) -> CompletionResult:
        text = self.responses.get(fingerprint_messages(messages), self.fallback)
        prompt_words = sum(len(m["content"].split()) for m in messages)
        return CompletionResult(
            text=text,
            prompt_tokens=prompt_words,
            completion_tokens=len(text.split()),
        )

    def to_file(self, path: str | Path) -> None:
        payload = {
            "format_version": 1,
            "fallback": self.fallback,
            "responses": self.responses,
        }
        Path(path).write_text(
            json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8"
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise DataFormatError(f"cannot read script: {exc}", path=str(path)) from exc
        if not isinstance(data, dict) or "responses" not in data:
            raise DataFormatError("script must be a JSON object with a 'responses' map", path=str(path))
        return cls(
            responses=data["responses"],
            fallback=data.get("fallback", DEFAULT_SCRIPT_FALLBACK),
        )


def chat(
    messages: Sequence[Mapping[str, str]],
    config: LlmConfig,
    backend: ChatBackend,
    *,
    sleep=time.sleep,
) -> ChatExchange:
    """Send one prompt, retrying transient failures with exponential backoff.

    Never mutates ``messages``. Raises :class:`ExhaustedRetriesError` once
    ``config.retry_limit`` retries are spent; malformed responses and context
    overflows are not retried.
    """
    if not messages:
        raise ValueError("messages must be non-empty")
    sent = [{"role": m["role"], "content": m["content"]} for m in messages]
    attempts = config.retry_limit + 1
    last_error: Exception | None = None
    for attempt in range(1, attempts + 1):
        started = time.perf_counter()
        try:
            result = backend.complete(sent, config)
        except TransientBackendError as exc:
            last_error = exc
            log.warning("attempt %d/%d failed: %s", attempt, attempts, exc)
            if attempt < attempts:
                sleep(_BACKOFF_BASE_S * 2 ** (attempt - 1))
            continue
        if not result.text:
            raise MalformedResponseError("endpoint returned an empty message")
        return ChatExchange(
            messages=tuple((m["role"], m["content"]) for m in sent),
            response=result.text,
            prompt_tokens=result.prompt_tokens,
            completion_tokens=result.completion_tokens,
            latency_s=time.perf_counter() - started,
            attempt=attempt,
        )
    raise ExhaustedRetriesError(
        f"gave up after {attempts} attempts: {last_error}", attempts=attempts
    )


# ---------------------------------------------------------------------------
# Transcript store
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StoredExchange:
    """A transcript record: an exchange plus its id and context tags."""

    id: str
    exchange: ChatExchange
    tags: Mapping[str, object] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        record = {"id": self.id, "tags": dict(self.tags)}
        record.update(self.exchange.to_json_dict())
        return record

    @classmethod
    def from_json_dict(cls, data: dict) -> "StoredExchange":
        return cls(
            id=data["id"],
            exchange=ChatExchange.from_json_dict(data),
            tags=data.get("tags", {}),
        )


class TranscriptStore:
    """Append-only store of every exchange, optionally persisted as JSONL.

    ``put`` without an explicit id assigns fresh sequential ids; two puts of
    identical exchanges therefore get distinct ids. Callers that need ids
    that are reproducible across resumed or parallel runs may pass their own
    id; ``get`` then resolves to the most recent record under that id while
    the append-only file keeps every attempt for audit.
    """

    _AUTO_ID = re.compile(r"^t(\d{6,})$")

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._records: list[StoredExchange] = []
        self._by_id: dict[str, StoredExchange] = {}
        self._seq = 0
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        assert self.path is not None
        with self.path.open("r", encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = StoredExchange.from_json_dict(json.loads(line))
                except (ValueError, KeyError) as exc:
                    raise DataFormatError(
                        f"bad transcript record: {exc}",
                        path=str(self.path),
                        line_no=line_no,
                    ) from exc
                self._remember(record)

    def _remember(self, record: StoredExchange) -> None:
        self._records.append(record)
        self._by_id[record.id] = record
        match = self._AUTO_ID.match(record.id)
        if match:
            self._seq = max(self._seq, int(match.group(1)))

    def put(
        self,
        exchange: ChatExchange,
        *,
        id: str | None = None,
        tags: Mapping[str, object] | None = None,
    ) -> str:
        with self._lock:
            if id is None:
                self._seq += 1
                id = f"t{self._seq:06d}"
            record = StoredExchange(id=id, exchange=exchange, tags=dict(tags or {}))
            self._remember(record)
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as handle:
                    handle.write(json.dumps(record.to_json_dict()) + "\n")
        return id

    def get(self, id: str) -> StoredExchange:
        try:
            return self._by_id[id]
        except KeyError:
            raise UnknownTranscriptIdError(f"unknown transcript id: {id!r}") from None

    def records(self) -> list[StoredExchange]:
        """All records in append order."""
        with self._lock:
            return list(self._records)

    def __len__(self) -> int:
        return len(self._records)
