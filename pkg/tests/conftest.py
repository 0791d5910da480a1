import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None)
settings.load_profile("default")

SC_MARKER = "output score = [score1, score2]"


class StubScorer:
    """Local HTTP scorer with scripted replies.

    ``reply(body, n)`` returns ``(status, text)`` for the n-th request
    (1-based, global across threads); the default gives every edit a
    passing grade.  Tracks peak concurrency.
    """

    def __init__(self, delay: float = 0.02):
        self.delay = delay
        self.requests: list[dict] = []
        self.in_flight = 0
        self.peak = 0
        self.lock = threading.Lock()
        self.reply = self.default_reply
        self.auth: list[str | None] = []

    @staticmethod
    def default_reply(body, n):
        if SC_MARKER in body["prompt"]:
            return 200, json.dumps({"reasoning": "edit carried out", "score": [9, 10]})
        return 200, json.dumps({"reasoning": "clean image", "score": [9]})

    def handler(self):
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                with stub.lock:
                    stub.requests.append(body)
                    stub.auth.append(self.headers.get("Authorization"))
                    n = len(stub.requests)
                    stub.in_flight += 1
                    stub.peak = max(stub.peak, stub.in_flight)
                try:
                    threading.Event().wait(stub.delay)  # immune to patched time.sleep
                    status, text = stub.reply(body, n)
                finally:
                    with stub.lock:
                        stub.in_flight -= 1
                payload = json.dumps({"text": text}).encode() if status == 200 else text.encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, *args):
                pass

        return Handler


@pytest.fixture
def stub_scorer():
    stub = StubScorer()
    server = ThreadingHTTPServer(("127.0.0.1", 0), stub.handler())
    server.daemon_threads = True
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    stub.url = f"http://127.0.0.1:{server.server_address[1]}/score"
    try:
        yield stub
    finally:
        server.shutdown()
        server.server_close()
