"""Scripted chat-completion service for tests and offline runs.

Serves the same HTTP surface the real backend client speaks. Three behaviors,
checked in order per request:

1. replay: exact canned response for a known prompt (keyed by sha256 of the
   prompt text; the replay file is a JSON object hash -> response text),
2. echo mode: return the fenced JSON state block embedded in the prompt
   verbatim (a valid identity modification),
3. garbage mode: plain prose with no parsable block.

A fixed latency per request simulates provider round-trip time.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

_FENCED_JSON = re.compile(r"```json\s*(\{.*?\})\s*```", re.DOTALL)


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def load_replay_file(path: str | Path) -> dict[str, str]:
    return json.loads(Path(path).read_text())


class MockLLMService:
    """Local threading HTTP server mimicking a chat-completion endpoint."""

    def __init__(self, latency_s: float = 0.0, mode: str = "echo",
                 replay: dict[str, str] | None = None, port: int = 0):
        if mode not in ("echo", "garbage"):
            raise ValueError(f"unknown mode {mode!r}")
        self.latency_s = latency_s
        self.mode = mode
        self.replay = replay or {}
        self.request_count = 0
        self._count_lock = threading.Lock()
        service = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):  # noqa: N802 (http.server API)
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length) or b"{}")
                try:
                    prompt = body["messages"][-1]["content"]
                except (KeyError, IndexError):
                    self.send_error(400, "malformed chat request")
                    return
                with service._count_lock:
                    service.request_count += 1
                if service.latency_s > 0:
                    time.sleep(service.latency_s)
                content = service._respond(prompt)
                payload = json.dumps({
                    "choices": [{"message": {"role": "assistant", "content": content}}],
                }).encode("utf-8")
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, *args):  # silence per-request stderr noise
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", port), Handler)
        self._server.daemon_threads = True
        self._thread: threading.Thread | None = None

    def _respond(self, prompt: str) -> str:
        canned = self.replay.get(prompt_hash(prompt))
        if canned is not None:
            return canned
        if self.mode == "echo":
            blocks = _FENCED_JSON.findall(prompt)
            if blocks:
                return ("Given the situation I will keep my plan feasible.\n"
                        f"```json\n{blocks[-1]}\n```")
        return "Sorry, I can only chat about the weather today."

    @property
    def endpoint(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}/v1"

    def start(self) -> "MockLLMService":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> "MockLLMService":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
