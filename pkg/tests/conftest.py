"""Shared fixtures: scripted backends and an in-process mock HTTP endpoint."""

from __future__ import annotations

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from arise import TrialOutcome


class ScriptedBackend:
    """Returns pre-scripted outcomes keyed by (sample_id, level_index).

    Trial indices past the end of a script repeat its last entry, so a
    script can pin the interesting prefix and stay flat afterwards.
    """

    def __init__(self, script: dict[tuple[str, int], list[TrialOutcome]]):
        self.script = {key: list(seq) for key, seq in script.items()}
        self.calls: list[tuple[str, int, int]] = []

    def evaluate(self, sample_id: str, level_index: int, trial_index: int) -> TrialOutcome:
        self.calls.append((sample_id, level_index, trial_index))
        seq = self.script[(sample_id, level_index)]
        return seq[trial_index] if trial_index < len(seq) else seq[-1]


class FlakyBackend:
    """Fails the first `failures` calls per configuration, then succeeds."""

    def __init__(self, failures: int, outcome: TrialOutcome = TrialOutcome(1.0, 100.0)):
        self.failures = failures
        self.outcome = outcome
        self.attempts: dict[tuple[str, int, int], int] = {}

    def evaluate(self, sample_id: str, level_index: int, trial_index: int) -> TrialOutcome:
        key = (sample_id, level_index, trial_index)
        self.attempts[key] = self.attempts.get(key, 0) + 1
        if self.attempts[key] <= self.failures:
            raise ConnectionError(f"transient failure {self.attempts[key]} for {key}")
        return self.outcome


class MockModelServer:
    """State shared between a test and the in-process HTTP handler."""

    def __init__(self) -> None:
        self.lock = threading.Lock()
        self.url = ""
        self.bodies: list[dict] = []
        self.headers: list[dict[str, str]] = []
        self.start_times: list[float] = []
        self.in_flight = 0
        self.max_in_flight = 0
        self.status_queue: list[int] = []  # consumed per request; empty means 200
        self.handler_delay = 0.0
        self.reply = self.default_reply

    @staticmethod
    def default_reply(body: dict) -> dict:
        return {
            "choices": [{"message": {"content": "42"}}],
            "usage": {"completion_tokens": 128},
        }


@pytest.fixture()
def mock_server():
    state = MockModelServer()

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self) -> None:  # noqa: N802 (http.server API)
            with state.lock:
                state.in_flight += 1
                state.max_in_flight = max(state.max_in_flight, state.in_flight)
                state.start_times.append(time.monotonic())
                status = state.status_queue.pop(0) if state.status_queue else 200
            try:
                length = int(self.headers.get("Content-Length", "0"))
                body = json.loads(self.rfile.read(length) or b"{}")
                with state.lock:
                    state.bodies.append(body)
                    state.headers.append(dict(self.headers.items()))
                if state.handler_delay:
                    time.sleep(state.handler_delay)
                reply = state.reply(body) if status == 200 else {"error": {"code": status}}
                payload = json.dumps(reply).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)
            finally:
                with state.lock:
                    state.in_flight -= 1

        def log_message(self, *args: object) -> None:
            pass

    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    state.url = f"http://127.0.0.1:{server.server_address[1]}/v1/chat/completions"
    try:
        yield state
    finally:
        server.shutdown()
        thread.join(timeout=5)
        server.server_close()


def backend_config_dict(url: str, **overrides) -> dict:
    """A minimal two-level chat-completions config pointed at `url`."""
    data = {
        "base_url": url,
        "auth_env_var": "MOCK_API_KEY",
        "model": "mock-model",
        "request_template": {
            "model": "{{model}}",
            "messages": [{"role": "user", "content": "{{prompt}}"}],
        },
        "levels": [
            {"label": "low", "kind": "effort", "request_overrides": {"reasoning_effort": "low"}},
            {"label": "high", "kind": "effort", "request_overrides": {"reasoning_effort": "high"}},
        ],
    }
    data.update(overrides)
    return data


@pytest.fixture()
def api_key(monkeypatch):
    monkeypatch.setenv("MOCK_API_KEY", "sk-mock-test-credential-000")
    return "sk-mock-test-credential-000"
