import asyncio
import json
import random

import httpx
import pytest

from ferkit.client import ChatDialect, ChatRequest, ClientConfig, ModelClient, ResponseCache
from ferkit.errors import AuthError, ExhaustedRetries, MalformedResponse, RequestRejected

from conftest import chat_body


def _cfg(tmp_path=None, **kw):
    base = dict(endpoint="http://mock/v1/chat/completions", backoff_base=0.001, backoff_ceiling=0.01,
                api_key_env="FERKIT_TEST_KEY")
    if tmp_path is not None:
        base["cache_dir"] = tmp_path / "cache"
    base.update(kw)
    return ClientConfig(**base)


def _req(i=0, **kw):
    return ChatRequest(model="m", system="sys", user=f"question {i}", image=b"\x89PNG", media_type="image/png", **kw)


def _ok(text):
    return httpx.Response(200, json=chat_body(text))


def test_digest_covers_every_field():
    base = _req()
    variants = [
        _req(temperature=0.5),
        _req(max_output_tokens=10),
        ChatRequest("m2", "sys", "question 0", b"\x89PNG", "image/png"),
        ChatRequest("m", "sys2", "question 0", b"\x89PNG", "image/png"),
        ChatRequest("m", "sys", "question 0", b"\x89PNG!", "image/png"),
        ChatRequest("m", "sys", "question 0", b"\x89PNG", "image/jpeg"),
        ChatRequest("m", "sys", "question 0"),
    ]
    digests = {v.digest() for v in variants}
    assert base.digest() == _req().digest()
    assert base.digest() not in digests and len(digests) == len(variants)


def test_request_validation():
    with pytest.raises(ValueError):
        _req(temperature=-1)
    with pytest.raises(ValueError):
        ChatRequest("m", "s", "u", image=b"")


def test_payload_shape():
    payload = ChatDialect().build_payload(_req())
    assert payload["temperature"] == 0
    assert payload["messages"][0] == {"role": "system", "content": "sys"}
    parts = payload["messages"][1]["content"]
    assert parts[0]["image_url"]["url"].startswith("data:image/png;base64,")
    assert parts[1]["text"] == "question 0"


def test_cache_hit_second_time(tmp_path):
    calls = []

    def handler(request):
        calls.append(request)
        return _ok("<answer>fear</answer>")

    client = ModelClient(_cfg(tmp_path), transport=httpx.MockTransport(handler))
    first = client.complete(_req())
    second = client.complete(_req())
    assert not first.from_cache and second.from_cache
    assert first.text == second.text
    assert len(calls) == 1
    entry = json.loads((tmp_path / "cache" / f"{_req().digest()}.json").read_text())
    assert set(entry) == {"request_digest", "model", "text", "created_at", "latency_ms"}


def test_corrupt_cache_entry_is_ignored(tmp_path):
    cache = ResponseCache(tmp_path)
    cache.path("abc").write_text("{truncated")
    assert cache.get("abc") is None


def test_retry_then_success():
    statuses = iter([429, 200])

    def handler(request):
        status = next(statuses)
        return _ok("x") if status == 200 else httpx.Response(status, headers={"Retry-After": "0"})

    resp = ModelClient(_cfg(), transport=httpx.MockTransport(handler)).complete(_req())
    assert resp.attempt_count == 2 and resp.text == "x"


def test_retries_transport_errors_and_5xx():
    seq = iter(["timeout", 503, "connect", 200])

    def handler(request):
        s = next(seq)
        if s == "timeout":
            raise httpx.ReadTimeout("slow", request=request)
        if s == "connect":
            raise httpx.ConnectError("refused", request=request)
        return _ok("done") if s == 200 else httpx.Response(s)

    resp = ModelClient(_cfg(retry_budget=3), transport=httpx.MockTransport(handler)).complete(_req())
    assert resp.attempt_count == 4


def test_auth_error_not_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(401)

    with pytest.raises(AuthError):
        ModelClient(_cfg(), transport=httpx.MockTransport(handler)).complete(_req())
    assert len(calls) == 1


def test_exhausted_retries():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(500)

    with pytest.raises(ExhaustedRetries) as info:
        ModelClient(_cfg(retry_budget=2), transport=httpx.MockTransport(handler)).complete(_req())
    assert len(calls) == 3 and info.value.attempts == 3


def test_other_4xx_rejected_and_malformed_body():
    client = ModelClient(_cfg(), transport=httpx.MockTransport(lambda r: httpx.Response(400, text="bad")))
    with pytest.raises(RequestRejected):
        client.complete(_req())
    client = ModelClient(_cfg(), transport=httpx.MockTransport(lambda r: httpx.Response(200, text="<html>")))
    with pytest.raises(MalformedResponse):
        client.complete(_req())
    client = ModelClient(_cfg(), transport=httpx.MockTransport(lambda r: httpx.Response(200, json={"x": 1})))
    with pytest.raises(MalformedResponse):
        client.complete(_req())


def test_api_key_sent_but_not_cached(tmp_path, monkeypatch):
    monkeypatch.setenv("FERKIT_TEST_KEY", "sekrit")
    seen = []

    def handler(request):
        seen.append(request.headers.get("authorization"))
        return _ok("ok")

    ModelClient(_cfg(tmp_path), transport=httpx.MockTransport(handler)).complete(_req())
    assert seen == ["Bearer sekrit"]
    assert all("sekrit" not in p.read_text() for p in (tmp_path / "cache").iterdir())


def test_batch_bounded_concurrency_and_order():
    state = {"now": 0, "peak": 0}
    rng = random.Random(0)

    async def handler(request):
        state["now"] += 1
        state["peak"] = max(state["peak"], state["now"])
        await asyncio.sleep(rng.uniform(0, 0.01))
        state["now"] -= 1
        body = json.loads(request.content)
        return _ok(body["messages"][-1]["content"][1]["text"])

    reqs = [_req(i) for i in range(100)]
    out = ModelClient(_cfg(max_in_flight=8), transport=httpx.MockTransport(handler)).batch_complete(reqs)
    assert state["peak"] <= 8
    assert state["peak"] > 1
    assert [r.text for r in out] == [f"question {i}" for i in range(100)]


def test_batch_isolates_failures():
    def handler(request):
        body = json.loads(request.content)
        if body["messages"][-1]["content"][1]["text"] == "question 3":
            return httpx.Response(403)
        return _ok("fine")

    out = ModelClient(_cfg(), transport=httpx.MockTransport(handler)).batch_complete([_req(i) for i in range(10)])
    assert sum(r.ok for r in out) == 9
    assert isinstance(out[3].error, AuthError)


def test_batch_resume_only_hits_uncached(tmp_path):
    calls = []

    def handler(request):
        calls.append(1)
        return _ok("x")

    transport = httpx.MockTransport(handler)
    ModelClient(_cfg(tmp_path), transport=transport).batch_complete([_req(i) for i in range(4)])
    calls.clear()
    out = ModelClient(_cfg(tmp_path), transport=transport).batch_complete([_req(i) for i in range(6)])
    assert len(calls) == 2
    assert [r.from_cache for r in out] == [True] * 4 + [False] * 2


def test_real_http_round_trip(chat_server):
    srv = chat_server(lambda payload: (200, chat_body("<answer>neutral</answer>")))
    resp = ModelClient(_cfg(endpoint=srv.url)).complete(_req())
    assert resp.text == "<answer>neutral</answer>"
    assert srv.payloads[0]["model"] == "m"
