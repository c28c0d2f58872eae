"""Chat-completion client: bounded concurrency, retries with backoff, content-addressed cache.

One generic JSON dialect (OpenAI-style ``/chat/completions`` with a base64
``data:`` image URL) is built in. Vendors that differ subclass
:class:`ChatDialect` and pass it to :class:`ModelClient`.
"""

from __future__ import annotations

import asyncio
import base64
import hashlib
import json
import logging
import os
import random
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import httpx

from .errors import AuthError, ClientError, ExhaustedRetries, MalformedResponse, RequestRejected
from .fileio import atomic_write_text

log = logging.getLogger(__name__)

DEFAULT_MAX_OUTPUT_TOKENS = 2048


@dataclass(frozen=True)
class ChatRequest:
    model: str
    system: str
    user: str
    image: bytes | None = None
    media_type: str = "image/jpeg"
    temperature: float = 0.0
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.image is not None and len(self.image) == 0:
            raise ValueError("image must be non-empty when given")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")

    def digest(self) -> str:
        """SHA-256 over every identity field; JSON framing keeps field boundaries unambiguous."""
        image_hash = hashlib.sha256(self.image).hexdigest() if self.image is not None else None
        ident = [
            self.model,
            self.system,
            self.user,
            self.media_type if self.image is not None else None,
            image_hash,
            float(self.temperature),
            int(self.max_output_tokens),
        ]
        return hashlib.sha256(json.dumps(ident, ensure_ascii=True).encode()).hexdigest()


@dataclass
class ModelResponse:
    request_digest: str
    text: str
    latency_ms: float
    from_cache: bool
    attempt_count: int
    error: ClientError | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class ClientConfig:
    endpoint: str = "http://localhost:8000/v1/chat/completions"
    api_key_env: str | None = "OPENAI_API_KEY"
    max_in_flight: int = 8
    retry_budget: int = 3
    backoff_base: float = 1.0
    backoff_ceiling: float = 60.0
    cache_dir: str | Path | None = None
    timeout: float = 120.0
    extra_headers: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.retry_budget < 0:
            raise ValueError("retry_budget must be >= 0")

    def headers(self) -> dict[str, str]:
        h = {"Content-Type": "application/json", **self.extra_headers}
        key = os.environ.get(self.api_key_env, "") if self.api_key_env else ""
        if key:
            h["Authorization"] = f"Bearer {key}"
        return h


class ChatDialect:
    """Request/response mapping for OpenAI-compatible chat-completion servers."""

    def build_payload(self, req: ChatRequest) -> dict[str, Any]:
        user: Any = req.user
        if req.image is not None:
            b64 = base64.b64encode(req.image).decode("ascii")
            user = [
                {"type": "image_url", "image_url": {"url": f"data:{req.media_type};base64,{b64}"}},
                {"type": "text", "text": req.user},
            ]
        messages = [{"role": "system", "content": req.system}] if req.system else []
        messages.append({"role": "user", "content": user})
        return {
            "model": req.model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        }

    def parse_text(self, body: Any) -> str:
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"no choices[0].message.content in response: {exc!r}") from None
        if isinstance(content, list):
            content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
        if not isinstance(content, str):
            raise MalformedResponse(f"message content is {type(content).__name__}, expected text")
        return content


class ResponseCache:
    """One ``<digest>.json`` file per request; writes land via rename."""

    def __init__(self, directory: str | Path) -> None:
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)

    def path(self, digest: str) -> Path:
        return self.dir / f"{digest}.json"

    def get(self, digest: str) -> dict[str, Any] | None:
        p = self.path(digest)
        try:
            entry = json.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
        except (json.JSONDecodeError, UnicodeDecodeError):
            log.warning("ignoring unreadable cache entry %s", p.name)
            return None
        return entry if entry.get("request_digest") == digest else None

    def put(self, digest: str, model: str, text: str, latency_ms: float) -> None:
        entry = {
            "request_digest": digest,
            "model": model,
            "text": text,
            "created_at": datetime.now(timezone.utc).isoformat(),
            "latency_ms": latency_ms,
        }
        atomic_write_text(self.path(digest), json.dumps(entry, ensure_ascii=False))


def _retry_after(resp: httpx.Response) -> float | None:
    value = resp.headers.get("retry-after")
    try:
        return float(value) if value is not None else None
    except ValueError:
        return None


class ModelClient:
    def __init__(
        self,
        cfg: ClientConfig,
        dialect: ChatDialect | None = None,
        transport: httpx.AsyncBaseTransport | None = None,
    ) -> None:
        self.cfg = cfg
        self.dialect = dialect or ChatDialect()
        self.transport = transport
        self.cache = ResponseCache(cfg.cache_dir) if cfg.cache_dir else None

    def _backoff(self, attempt: int, hint: float | None) -> float:
        delay = min(self.cfg.backoff_ceiling, self.cfg.backoff_base * 2 ** (attempt - 1))
        if hint is not None:
            delay = min(self.cfg.backoff_ceiling, max(delay, hint))
        return delay * (0.5 + random.random() / 2)

    async def _send(self, http: httpx.AsyncClient, req: ChatRequest, digest: str) -> ModelResponse:
        if self.cache is not None:
            hit = self.cache.get(digest)
            if hit is not None:
                return ModelResponse(digest, hit["text"], float(hit.get("latency_ms", 0.0)), True, 0)

        payload = self.dialect.build_payload(req)
        budget = self.cfg.retry_budget
        last = "no attempt made"
        for attempt in range(1, budget + 2):
            hint = None
            t0 = time.perf_counter()
            try:
                resp = await http.post(self.cfg.endpoint, json=payload, headers=self.cfg.headers())
            except httpx.TimeoutException as exc:
                last = f"timeout: {exc!r}"
            except httpx.TransportError as exc:
                last = f"transport error: {exc!r}"
            else:
                status = resp.status_code
                if status in (401, 403):
                    raise AuthError(f"HTTP {status} from {self.cfg.endpoint}")
                if status == 429 or status >= 500:
                    last = f"HTTP {status}"
                    hint = _retry_after(resp)
                elif status >= 400:
                    raise RequestRejected(status, resp.text)
                else:
                    latency = (time.perf_counter() - t0) * 1000.0
                    try:
                        body = resp.json()
                    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                        raise MalformedResponse(f"response body is not JSON: {exc}") from None
                    text = self.dialect.parse_text(body)
                    if self.cache is not None:
                        self.cache.put(digest, req.model, text, latency)
                    return ModelResponse(digest, text, latency, False, attempt)
            if attempt <= budget:
                log.warning("request %s attempt %d failed (%s); retrying", digest[:12], attempt, last)
                await asyncio.sleep(self._backoff(attempt, hint))
        raise ExhaustedRetries(budget + 1, last)

    def _http(self) -> httpx.AsyncClient:
        limits = httpx.Limits(max_connections=self.cfg.max_in_flight)
        return httpx.AsyncClient(timeout=self.cfg.timeout, limits=limits, transport=self.transport)

    async def abatch_complete(self, reqs: Sequence[ChatRequest]) -> list[ModelResponse]:
        gate = asyncio.Semaphore(self.cfg.max_in_flight)
        out: list[ModelResponse | None] = [None] * len(reqs)

        async with self._http() as http:

            async def run(i: int, req: ChatRequest) -> None:
                digest = req.digest()
                async with gate:
                    try:
                        out[i] = await self._send(http, req, digest)
                    except ClientError as exc:
                        out[i] = ModelResponse(digest, "", 0.0, False, 0, error=exc)

            await asyncio.gather(*(run(i, r) for i, r in enumerate(reqs)))
        return out  # type: ignore[return-value]

    def batch_complete(self, reqs: Sequence[ChatRequest]) -> list[ModelResponse]:
        """Complete every request; failures come back in place with ``error`` set."""
        if not reqs:
            raise ValueError("batch must be non-empty")
        return asyncio.run(self.abatch_complete(reqs))

    def complete(self, req: ChatRequest) -> ModelResponse:
        """Complete one request, raising the ClientError on failure."""

        async def one() -> ModelResponse:
            async with self._http() as http:
                return await self._send(http, req, req.digest())

        return asyncio.run(one())


def complete(req: ChatRequest, cfg: ClientConfig, **kw: Any) -> ModelResponse:
    return ModelClient(cfg, **kw).complete(req)


def batch_complete(reqs: Sequence[ChatRequest], cfg: ClientConfig, **kw: Any) -> list[ModelResponse]:
    return ModelClient(cfg, **kw).batch_complete(reqs)
