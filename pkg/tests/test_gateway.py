from __future__ import annotations

import http.server
import json
import socketserver
import threading

import pytest

from ctlabeler.errors import (
    ContextOverflowError,
    DataFormatError,
    ExhaustedRetriesError,
    MalformedResponseError,
    TransientBackendError,
    UnknownTranscriptIdError,
)
from ctlabeler.gateway import (
    ChatExchange,
    CompletionResult,
    HttpChatBackend,
    ScriptedBackend,
    TranscriptStore,
    chat,
    fingerprint_messages,
)
from ctlabeler.schema import LlmConfig


MESSAGES = [{"role": "user", "content": "Is the liver mentioned?"}]


def _no_sleep(_: float) -> None:
    pass


# ---------------------------------------------------------------------------
# Fingerprints
# ---------------------------------------------------------------------------


def test_fingerprint_is_deterministic():
    assert fingerprint_messages(MESSAGES) == fingerprint_messages(
        [{"role": "user", "content": "Is the liver mentioned?"}]
    )


def test_fingerprint_depends_on_content_and_role():
    base = fingerprint_messages(MESSAGES)
    assert base != fingerprint_messages(
        [{"role": "user", "content": "Is the spleen mentioned?"}]
    )
    assert base != fingerprint_messages(
        [{"role": "assistant", "content": "Is the liver mentioned?"}]
    )


def test_fingerprint_depends_on_turn_boundaries():
    joined = fingerprint_messages([{"role": "user", "content": "ab"}])
    split = fingerprint_messages(
        [{"role": "user", "content": "a"}, {"role": "user", "content": "b"}]
    )
    assert joined != split


def test_fingerprint_ignores_config():
    backend = ScriptedBackend({fingerprint_messages(MESSAGES): "yes"})
    hot = LlmConfig(temperature=1.5, model_name="other")
    assert backend.complete(MESSAGES, hot).text == "yes"


# ---------------------------------------------------------------------------
# ScriptedBackend
# ---------------------------------------------------------------------------


def test_scripted_backend_hit_and_miss():
    backend = ScriptedBackend({fingerprint_messages(MESSAGES): "yes"})
    hit = backend.complete(MESSAGES, LlmConfig())
    assert hit.text == "yes"
    miss = backend.complete([{"role": "user", "content": "unknown"}], LlmConfig())
    assert miss.text != "yes"
    assert "cannot" in miss.text.lower()


def test_scripted_backend_file_round_trip(tmp_path):
    script = {fingerprint_messages(MESSAGES): "yes", "deadbeef": "no"}
    backend = ScriptedBackend(script, fallback="off script")
    path = tmp_path / "script.json"
    backend.to_file(path)
    reloaded = ScriptedBackend.from_file(path)
    assert reloaded.complete(MESSAGES, LlmConfig()).text == "yes"
    assert reloaded.fallback == "off script"


def test_scripted_backend_rejects_bad_script(tmp_path):
    path = tmp_path / "script.json"
    path.write_text(json.dumps(["not", "a", "mapping"]), encoding="utf-8")
    with pytest.raises(DataFormatError):
        ScriptedBackend.from_file(path)
    path.write_text("not json at all", encoding="utf-8")
    with pytest.raises(DataFormatError):
        ScriptedBackend.from_file(path)


# ---------------------------------------------------------------------------
# chat(): retry accounting
# ---------------------------------------------------------------------------


def test_chat_does_not_mutate_messages():
    backend = ScriptedBackend({fingerprint_messages(MESSAGES): "yes"})
    snapshot = [dict(m) for m in MESSAGES]
    exchange = chat(MESSAGES, LlmConfig(), backend)
    assert MESSAGES == snapshot
    assert exchange.response == "yes"
    assert exchange.attempt == 1
    assert exchange.message_dicts() == MESSAGES


def test_chat_rejects_empty_messages():
    with pytest.raises(ValueError):
        chat([], LlmConfig(), ScriptedBackend())


class FlakyBackend:
    """Fails with transient errors a fixed number of times, then succeeds."""

    def __init__(self, failures: int):
        self.failures = failures
        self.calls = 0

    def complete(self, messages, config):
        self.calls += 1
        if self.calls <= self.failures:
            raise TransientBackendError(f"flaky failure {self.calls}")
        return CompletionResult(text="ok")


def test_chat_retries_transient_failures_with_backoff():
    sleeps: list[float] = []
    backend = FlakyBackend(failures=2)
    exchange = chat(MESSAGES, LlmConfig(retry_limit=3), backend, sleep=sleeps.append)
    assert exchange.response == "ok"
    assert exchange.attempt == 3
    assert backend.calls == 3
    assert sleeps == [0.5, 1.0]


def test_chat_exhausts_retries():
    backend = FlakyBackend(failures=10)
    with pytest.raises(ExhaustedRetriesError) as excinfo:
        chat(MESSAGES, LlmConfig(retry_limit=2), backend, sleep=_no_sleep)
    assert backend.calls == 3  # retry_limit + 1 attempts
    assert excinfo.value.attempts == 3


def test_chat_retry_limit_zero_means_single_attempt():
    backend = FlakyBackend(failures=10)
    with pytest.raises(ExhaustedRetriesError) as excinfo:
        chat(MESSAGES, LlmConfig(retry_limit=0), backend, sleep=_no_sleep)
    assert backend.calls == 1
    assert excinfo.value.attempts == 1


def test_chat_does_not_retry_permanent_failures():
    class BrokenBackend:
        def __init__(self):
            self.calls = 0

        def complete(self, messages, config):
            self.calls += 1
            raise MalformedResponseError("bad payload")

    backend = BrokenBackend()
    with pytest.raises(MalformedResponseError):
        chat(MESSAGES, LlmConfig(retry_limit=5), backend, sleep=_no_sleep)
    assert backend.calls == 1


def test_chat_rejects_empty_response_text():
    class EmptyBackend:
        def complete(self, messages, config):
            return CompletionResult(text="")

    with pytest.raises(MalformedResponseError):
        chat(MESSAGES, LlmConfig(), EmptyBackend())


# ---------------------------------------------------------------------------
# HTTP backend against a local server
# ---------------------------------------------------------------------------


class _ScriptedHttpHandler(http.server.BaseHTTPRequestHandler):
    responses: list[tuple[int, bytes]] = []
    seen: list[dict] = []

    def do_POST(self):
        length = int(self.headers.get("Content-Length", "0"))
        body = json.loads(self.rfile.read(length))
        type(self).seen.append(
            {"body": body, "auth": self.headers.get("Authorization"), "path": self.path}
        )
        status, data = type(self).responses.pop(0)
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture()
def http_server():
    handler = _ScriptedHttpHandler
    handler.responses = []
    handler.seen = []
    server = socketserver.TCPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield handler, f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()
    thread.join()


def _ok_body(text: str, usage: dict | None = None) -> bytes:
    payload = {"choices": [{"message": {"role": "assistant", "content": text}}]}
    if usage is not None:
        payload["usage"] = usage
    return json.dumps(payload).encode("utf-8")


def _config(url: str, **kwargs) -> LlmConfig:
    return LlmConfig(endpoint_url=url, model_name="test-model", **kwargs)


def test_http_backend_round_trip(monkeypatch, http_server):
    monkeypatch.delenv("CTLABELER_API_KEY", raising=False)
    handler, url = http_server
    handler.responses = [
        (200, _ok_body("the answer is yes", {"prompt_tokens": 12, "completion_tokens": 4}))
    ]
    backend = HttpChatBackend()
    result = backend.complete(MESSAGES, _config(url, temperature=0.25))
    assert result.text == "the answer is yes"
    assert result.prompt_tokens == 12
    assert result.completion_tokens == 4
    sent = handler.seen[0]
    assert sent["body"]["model"] == "test-model"
    assert sent["body"]["messages"] == MESSAGES
    assert sent["body"]["temperature"] == 0.25
    assert sent["path"] == "/chat/completions"
    assert sent["auth"] is None


def test_http_backend_recovers_after_500(http_server):
    handler, url = http_server
    handler.responses = [
        (500, b'{"error": "boom"}'),
        (500, b'{"error": "boom"}'),
        (200, _ok_body("ok")),
    ]
    backend = HttpChatBackend()
    exchange = chat(MESSAGES, _config(url, retry_limit=3), backend, sleep=_no_sleep)
    assert exchange.response == "ok"
    assert exchange.attempt == 3


def test_http_backend_429_is_transient(http_server):
    handler, url = http_server
    handler.responses = [(429, b'{"error": "slow down"}')]
    with pytest.raises(TransientBackendError):
        HttpChatBackend().complete(MESSAGES, _config(url))


def test_http_backend_maps_context_overflow(http_server):
    handler, url = http_server
    handler.responses = [
        (400, json.dumps({"error": {"message": "maximum context length exceeded"}}).encode())
    ]
    with pytest.raises(ContextOverflowError):
        HttpChatBackend().complete(MESSAGES, _config(url))


def test_http_backend_other_400_is_malformed(http_server):
    handler, url = http_server
    handler.responses = [(400, json.dumps({"error": {"message": "unknown field"}}).encode())]
    with pytest.raises(MalformedResponseError):
        HttpChatBackend().complete(MESSAGES, _config(url))


def test_http_backend_rejects_non_json_body(http_server):
    handler, url = http_server
    handler.responses = [(200, b"<html>gateway error</html>")]
    with pytest.raises(MalformedResponseError):
        HttpChatBackend().complete(MESSAGES, _config(url))


def test_http_backend_missing_choices_is_malformed(http_server):
    handler, url = http_server
    handler.responses = [(200, json.dumps({"id": "x", "choices": []}).encode())]
    with pytest.raises(MalformedResponseError):
        HttpChatBackend().complete(MESSAGES, _config(url))


def test_http_backend_sends_api_key_header(monkeypatch, http_server):
    handler, url = http_server
    handler.responses = [(200, _ok_body("ok"))]
    monkeypatch.setenv("CTLABELER_API_KEY", "sk-test-123")
    HttpChatBackend().complete(MESSAGES, _config(url))
    assert handler.seen[0]["auth"] == "Bearer sk-test-123"


def test_http_backend_explicit_key_beats_environment(monkeypatch, http_server):
    handler, url = http_server
    handler.responses = [(200, _ok_body("ok"))]
    monkeypatch.setenv("CTLABELER_API_KEY", "sk-env")
    HttpChatBackend(api_key="sk-explicit").complete(MESSAGES, _config(url))
    assert handler.seen[0]["auth"] == "Bearer sk-explicit"


def test_http_backend_connection_refused_is_transient():
    backend = HttpChatBackend()
    with pytest.raises(TransientBackendError):
        backend.complete(MESSAGES, _config("http://127.0.0.1:1"))


def test_http_backend_url_resolution():
    resolve = HttpChatBackend._resolve_url
    assert resolve("http://host:9/v1") == "http://host:9/v1/chat/completions"
    assert (
        resolve("http://host:9/v1/chat/completions")
        == "http://host:9/v1/chat/completions"
    )
    assert resolve("http://host:9/") == "http://host:9/chat/completions"
    with pytest.raises(ValueError):
        resolve("")


# ---------------------------------------------------------------------------
# TranscriptStore
# ---------------------------------------------------------------------------


def _exchange(response: str = "yes") -> ChatExchange:
    return ChatExchange(
        messages=(("user", "Is the liver mentioned?"),),
        response=response,
        prompt_tokens=5,
        completion_tokens=1,
        latency_s=0.01,
        attempt=1,
    )


def test_store_put_get_round_trip():
    store = TranscriptStore()
    stored_id = store.put(_exchange(), tags={"organ": "liver"})
    record = store.get(stored_id)
    assert record.exchange.response == "yes"
    assert record.tags["organ"] == "liver"
    assert record.exchange.message_dicts() == [
        {"role": "user", "content": "Is the liver mentioned?"}
    ]


def test_store_unknown_id_raises():
    store = TranscriptStore()
    with pytest.raises(UnknownTranscriptIdError):
        store.get("missing/id")


def test_store_assigns_distinct_ids_to_identical_puts():
    store = TranscriptStore()
    first = store.put(_exchange())
    second = store.put(_exchange())
    assert first != second
    assert len(store) == 2


def test_store_explicit_id_resolves_to_latest():
    store = TranscriptStore()
    store.put(_exchange("first"), id="r1/liver/urgency/focal")
    store.put(_exchange("second"), id="r1/liver/urgency/focal")
    assert store.get("r1/liver/urgency/focal").exchange.response == "second"
    assert len(store) == 2  # both attempts stay on the audit trail


def test_store_records_preserve_insertion_order(tmp_path):
    path = tmp_path / "transcripts.jsonl"
    store = TranscriptStore(path)
    ids = [store.put(_exchange(f"answer {i}")) for i in range(5)]
    assert [r.id for r in store.records()] == ids

    reloaded = TranscriptStore(path)
    assert [r.id for r in reloaded.records()] == ids
    assert reloaded.get(ids[3]).exchange.response == "answer 3"


def test_store_continues_sequence_after_reload(tmp_path):
    path = tmp_path / "transcripts.jsonl"
    first = TranscriptStore(path)
    existing = first.put(_exchange())
    reloaded = TranscriptStore(path)
    fresh = reloaded.put(_exchange())
    assert fresh != existing


def test_store_rejects_corrupt_file(tmp_path):
    path = tmp_path / "transcripts.jsonl"
    path.write_text('{"id": "a", "response": "x"}\nnot json\n', encoding="utf-8")
    with pytest.raises(DataFormatError) as excinfo:
        TranscriptStore(path)
    assert "2" in str(excinfo.value)
