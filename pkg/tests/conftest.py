"""Shared fixtures: a tiny gallery and a scriptable local HTTP server
used to exercise the http caption/embedding providers."""

from __future__ import annotations

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from cgrs.store import build_store
from cgrs.types import ImageRecord


@pytest.fixture
def tiny_store():
    records = [
        ImageRecord("img_a", "drone", None, 0),
        ImageRecord("img_b", "drone", None, 1),
        ImageRecord("img_c", "drone", None, 2),
    ]
    matrix = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]])
    return build_store(records, matrix)


class ScriptedServer:
    """Serves a fixed list of scripted responses in order and records
    every request (method, path, headers, parsed body)."""

    def __init__(self, responses):
        self.responses = list(responses)
        self.requests = []
        self._lock = threading.Lock()
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(length) if length else b""
                try:
                    body = json.loads(raw) if raw else None
                except json.JSONDecodeError:
                    body = raw
                with outer._lock:
                    outer.requests.append(
                        {
                            "path": self.path,
                            "headers": dict(self.headers),
                            "body": body,
                        }
                    )
                    if outer.responses:
                        step = outer.responses.pop(0)
                    else:
                        step = {"status": 500, "body": {"error": "script exhausted"}}
                delay = step.get("delay", 0)
                if delay:
                    time.sleep(delay)
                payload = json.dumps(step.get("body", {})).encode()
                self.send_response(step.get("status", 200))
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def url(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}/"

    def close(self):
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)


@pytest.fixture
def scripted_server():
    servers = []

    def start(responses):
        server = ScriptedServer(responses)
        servers.append(server)
        return server

    yield start
    for server in servers:
        server.close()
