"""In-process mock of the chat-completions and translate endpoints.

Runs a real HTTP server on localhost so the client stack (wire shapes, retry,
rate limiting, caching, offline enforcement) is exercised end to end without
leaving the machine. Counters expose how many requests actually hit the
network, which the hermeticity tests assert against.
"""

from __future__ import annotations

import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from poisonforge.genclient import mock_paraphrase

_REWRITE_RE = re.compile(r"Rewrite the paragraph: (.*) without altering", re.DOTALL)


class MockGeneratorServer:
    """Local chat/translate backend with per-endpoint hit counters.

    chat_mode:      "prefix" returns "[RW]" + payload, "table" applies the bundled
                    substitution table, "fail" answers HTTP 500.
    translate_mode: "identity" echoes, "reverse" flips word order, "fail" -> 500.
    """

    def __init__(self, chat_mode: str = "prefix", translate_mode: str = "identity", fail_first: int = 0):
        self.chat_mode = chat_mode
        self.translate_mode = translate_mode
        self.fail_first = fail_first  # force N transient failures before succeeding
        self.hits = 0
        self.chat_hits = 0
        self.translate_hits = 0
        self.ppl_hits = 0
        self._lock = threading.Lock()
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):  # keep test output quiet
                pass

            def _reply(self, status: int, body: dict) -> None:
                data = json.dumps(body).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def do_GET(self):
                if self.path == "/stats":
                    self._reply(200, {"hits": server.hits, "chat": server.chat_hits, "translate": server.translate_hits})
                else:
                    self._reply(404, {"error": "not found"})

            def do_POST(self):
                length = int(self.headers.get("Content-Length", "0"))
                try:
                    payload = json.loads(self.rfile.read(length) or b"{}")
                except json.JSONDecodeError:
                    self._reply(400, {"error": "bad json"})
                    return
                with server._lock:
                    server.hits += 1
                    if server.fail_first > 0:
                        server.fail_first -= 1
                        self._reply(503, {"error": "transient"})
                        return
                if self.path.endswith("/chat/completions"):
                    with server._lock:
                        server.chat_hits += 1
                    self._handle_chat(payload)
                elif self.path.endswith("/translate"):
                    with server._lock:
                        server.translate_hits += 1
                    self._handle_translate(payload)
                elif self.path.endswith("/ppl"):
                    with server._lock:
                        server.ppl_hits += 1
                    text = payload.get("text", "")
                    self._reply(200, {"ppl": 1.0 + float(len(text.split()))})
                else:
                    self._reply(404, {"error": "not found"})

            def _handle_chat(self, payload: dict) -> None:
                if server.chat_mode == "fail":
                    self._reply(500, {"error": "chat backend down"})
                    return
                user = next((m.get("content", "") for m in payload.get("messages", []) if m.get("role") == "user"), "")
                match = _REWRITE_RE.search(user)
                text = match.group(1) if match else user
                if server.chat_mode == "table":
                    out = mock_paraphrase(text)
                else:
                    out = "[RW]" + text
                self._reply(200, {"model": "mock-chat", "choices": [{"message": {"role": "assistant", "content": out}}]})

            def _handle_translate(self, payload: dict) -> None:
                if server.translate_mode == "fail":
                    self._reply(500, {"error": "translate backend down"})
                    return
                text = payload.get("text", "")
                out = " ".join(reversed(text.split())) if server.translate_mode == "reverse" else text
                self._reply(200, {"text": out})

        self._http = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._http.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._http.server_address[:2]
        return f"http://{host}:{port}"

    @property
    def chat_endpoint(self) -> str:
        return f"{self.url}/v1/chat/completions"

    @property
    def translate_endpoint(self) -> str:
        return f"{self.url}/translate"

    @property
    def ppl_endpoint(self) -> str:
        return f"{self.url}/ppl"

    def start(self) -> "MockGeneratorServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._http.shutdown()
        self._http.server_close()

    def __enter__(self) -> "MockGeneratorServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
