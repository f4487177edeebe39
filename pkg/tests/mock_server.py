"""In-process HTTP servers speaking the documented LM and embedding contracts.

The LM server answers the completion route from the same fixture records the
in-process mock uses, with the same digest keying and attempt bookkeeping, so
integration tests can assert that the HTTP client and the mock client behave
identically.
"""

import hashlib
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from kalmv.lm_client import MockLM, prompt_digest, scoring_digest


class _Quiet(BaseHTTPRequestHandler):
    def log_message(self, *args):
        pass

    def _read_json(self):
        length = int(self.headers.get("Content-Length", 0))
        return json.loads(self.rfile.read(length))

    def _send_json(self, obj, status=200):
        body = json.dumps(obj).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


class _ServerThread:
    handler_class: type

    def __init__(self):
        self.server = ThreadingHTTPServer(("127.0.0.1", 0), self.handler_class)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self):
        host, port = self.server.server_address
        return f"http://{host}:{port}/v1/completions"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


def lm_server(mock: MockLM, fail_first: int = 0):
    """HTTP server backed by the mock's fixture records."""
    state = {"failures_left": fail_first, "requests": 0, "auth_headers": []}
    attempts: dict[str, int] = {}
    lock = threading.Lock()

    class Handler(_Quiet):
        def do_POST(self):
            payload = self._read_json()
            with lock:
                state["requests"] += 1
                state["auth_headers"].append(self.headers.get("Authorization"))
                if state["failures_left"] > 0:
                    state["failures_left"] -= 1
                    self._send_json({"error": "scripted failure"}, status=500)
                    return
                score = payload.get("score")
                prompt = payload["prompt"]
                digest = (
                    prompt_digest(prompt) if score is None else scoring_digest(prompt, score)
                )
                attempt = attempts.get(digest, 0)
                attempts[digest] = attempt + 1
            try:
                record = mock.lookup(digest, attempt)
            except KeyError:
                self._send_json({"error": "no fixture"}, status=404)
                return
            response = {"text": record.text}
            if record.first_token_logprobs is not None:
                response["first_token_logprobs"] = record.first_token_logprobs
            if record.sequence_logprob is not None:
                response["sequence_logprob"] = record.sequence_logprob
                num_tokens = record.num_tokens
                if num_tokens is None:
                    scored = score if score is not None else record.text
                    num_tokens = max(1, len(scored.split()))
                response["num_tokens"] = num_tokens
            self._send_json(response)

    server = _ServerThread.__new__(_ServerThread)
    server.handler_class = Handler
    _ServerThread.__init__(server)
    server.state = state
    return server


def embedding_server(dim: int = 8):
    """Deterministic embedding endpoint: vectors derived from text digests."""
    state = {"requests": 0, "texts_seen": []}
    lock = threading.Lock()

    def vector_of(text):
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        return [digest[i] / 255.0 for i in range(dim)]

    class Handler(_Quiet):
        def do_POST(self):
            payload = self._read_json()
            with lock:
                state["requests"] += 1
                state["texts_seen"].extend(payload["input"])
            self._send_json({"data": [{"embedding": vector_of(t)} for t in payload["input"]]})

    server = _ServerThread.__new__(_ServerThread)
    server.handler_class = Handler
    _ServerThread.__init__(server)
    server.state = state
    server.vector_of = vector_of
    return server
