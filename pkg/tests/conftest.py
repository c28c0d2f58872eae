from __future__ import annotations

import json
import re
import threading
from collections import defaultdict
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable

import pytest

from ferkit.core import EmotionLabel

# --- acceptance summary: one line per criterion -----------------------------------

_criteria: dict[int, str] = {}
_outcomes: dict[int, list[str]] = defaultdict(list)


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m:
            _criteria[m.args[0]] = m.args[1]


def pytest_runtest_logreport(report):
    if report.when == "call" or report.outcome != "passed":
        m = re.search(r"criterion_(\d+)", report.nodeid)
        if m and "test_acceptance" in report.nodeid:
            _outcomes[int(m.group(1))].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        outcomes = _outcomes.get(n, [])
        if not outcomes:
            verdict = "NOT RUN"
        elif "failed" in outcomes:
            verdict = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        terminalreporter.write_line(f"criterion {n}: {verdict} - {_criteria[n]}")


# --- mock OpenAI-compatible chat server ---------------------------------------------

Reply = Callable[[dict], tuple[int, dict | str]]


class ChatServer:
    """Threaded HTTP server; ``reply(payload) -> (status, body)`` decides each response."""

    def __init__(self, reply: Reply) -> None:
        self.reply = reply
        self.hits = 0
        self.payloads: list[dict] = []
        self.lock = threading.Lock()
        server = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                with server.lock:
                    server.hits += 1
                    server.payloads.append(body)
                status, out = server.reply(body)
                data = (out if isinstance(out, str) else json.dumps(out)).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.httpd.server_address[1]}/v1/chat/completions"

    def __enter__(self) -> "ChatServer":
        self.thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()


def chat_body(text: str) -> dict:
    return {"choices": [{"message": {"role": "assistant", "content": text}}]}


def user_text(payload: dict) -> str:
    content = payload["messages"][-1]["content"]
    if isinstance(content, list):
        return "".join(p.get("text", "") for p in content)
    return content


def label_in_prompt_echo(payload: dict) -> tuple[int, dict]:
    """Answers the ground truth when the prompt states it, else the first listed candidate."""
    text = user_text(payload)
    m = re.search(r"Ground-truth emotion: (\w+)", text)
    label = m.group(1) if m else next(l.value for l in EmotionLabel if l.value in text)
    return 200, chat_body(f"<think>The face shows clear cues.</think><answer>{label}</answer>")


@pytest.fixture
def chat_server():
    servers = []

    def start(reply: Reply) -> ChatServer:
        srv = ChatServer(reply).__enter__()
        servers.append(srv)
        return srv

    yield start
    for srv in servers:
        srv.__exit__(None, None, None)
