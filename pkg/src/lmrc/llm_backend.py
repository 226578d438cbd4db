"""Generation backends: a scripted mock and an OpenAI-compatible HTTP client.

``generate_batch`` adds ordered parallel execution, rate limiting and a
resumable append-only completion ledger on top of any backend.
"""

from __future__ import annotations

import json
import logging
import os
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import httpx

logger = logging.getLogger(__name__)

_TRIPLE_LINE = re.compile(r"^\((.*)\|(.*)\|(.*)\)$")


class BackendError(RuntimeError):
    def __init__(self, tag: str, message: str):
        super().__init__(f"[{tag}] {message}")
        self.tag = tag


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    tag: str
    max_tokens: int = 1024
    temperature: float = 0.0
    stop: tuple[str, ...] = ("\n\n",)

    def __post_init__(self) -> None:
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass
class GenerationResult:
    tag: str
    text: str
    finish_reason: str  # stop | length | error
    latency: float = 0.0
    usage: dict[str, int] | None = None
    error: str | None = None
    cached: bool = False

    @property
    def truncated(self) -> bool:
        return self.finish_reason == "length"


class Backend(Protocol):
    def generate(self, request: GenerationRequest) -> GenerationResult: ...


def _cap(text: str, max_tokens: int) -> tuple[str, str]:
    words = text.split(" ")
    if len(words) > max_tokens:
        return " ".join(words[:max_tokens]), "length"
    return text, "stop"


@dataclass
class MockScript:
    """Behaviour of :class:`MockBackend`.

    ``gold`` maps request tags to their gold completions. Each gold line is
    dropped with probability ``drop_rate``; surviving lines get their relation
    swapped for another relation with probability ``corrupt_rate``. ``canned``
    responses take precedence over gold echoing.
    """

    gold: Mapping[str, str] = field(default_factory=dict)
    drop_rate: float = 0.0
    corrupt_rate: float = 0.0
    relation_names: Sequence[str] = ()
    canned: Mapping[str, str] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self) -> None:
        for name, v in (("drop_rate", self.drop_rate), ("corrupt_rate", self.corrupt_rate)):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.corrupt_rate > 0 and len(self.relation_names) < 2:
            raise ValueError("corruption needs at least two relation names")


class MockBackend:
    """Deterministic backend; randomness is keyed by (seed, tag) so order does not matter."""

    def __init__(self, script: MockScript, fail_tags: Sequence[str] = ()):
        self.script = script
        self.fail_tags = set(fail_tags)
        self.calls: list[str] = []
        self._lock = threading.Lock()

    def generate(self, request: GenerationRequest) -> GenerationResult:
        with self._lock:
            self.calls.append(request.tag)
        if request.tag in self.fail_tags:
            raise BackendError(request.tag, "injected failure")
        s = self.script
        if request.tag in s.canned:
            text = s.canned[request.tag]
        else:
            text = self._echo(request.tag, s.gold.get(request.tag, ""))
        text, reason = _cap(text, request.max_tokens)
        return GenerationResult(request.tag, text, reason)

    def _echo(self, tag: str, gold: str) -> str:
        s = self.script
        rng = random.Random(f"{s.seed}:{tag}")
        lines = [ln for ln in gold.splitlines() if ln.strip()]
        pair_relations: dict[tuple[str, str], set[str]] = {}
        for ln in lines:
            m = _TRIPLE_LINE.match(ln)
            if m:
                pair_relations.setdefault((m[1], m[3]), set()).add(m[2].strip())
        out = []
        for ln in lines:
            if rng.random() < s.drop_rate:
                continue
            m = _TRIPLE_LINE.match(ln)
            if m and s.corrupt_rate and rng.random() < s.corrupt_rate:
                taken = pair_relations[(m[1], m[3])]
                choices = [r for r in s.relation_names if r not in taken]
                if choices:
                    ln = f"({m[1]}| {rng.choice(choices)}|{m[3]})"
            out.append(ln)
        return "\n".join(out)


class HTTPBackend:
    """Chat-completions client. The prompt travels as one user message."""

    def __init__(self, base_url: str | None = None, model: str | None = None,
                 api_key: str | None = None, timeout: float = 60.0, max_retries: int = 3,
                 backoff: float = 1.0, system_prompt: str | None = None,
                 client: httpx.Client | None = None, sleep: Callable[[float], None] = time.sleep):
        self.base_url = (base_url or "http://localhost:8000/v1").rstrip("/")
        self.model = model or "gpt-4-turbo"
        self.api_key = api_key if api_key is not None else os.environ.get("LMRC_API_KEY") or os.environ.get("OPENAI_API_KEY")
        self.max_retries = max_retries
        self.backoff = backoff
        self.system_prompt = system_prompt
        self._sleep = sleep
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        self._client = client or httpx.Client(timeout=timeout, headers=headers)

    def payload(self, request: GenerationRequest) -> dict:
        messages = []
        if self.system_prompt:
            messages.append({"role": "system", "content": self.system_prompt})
        messages.append({"role": "user", "content": request.prompt})
        body = {"model": self.model, "messages": messages, "temperature": request.temperature,
                "max_tokens": request.max_tokens}
        if request.stop:
            body["stop"] = list(request.stop)
        return body

    def generate(self, request: GenerationRequest) -> GenerationResult:
        url = f"{self.base_url}/chat/completions"
        last = "no attempt made"
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            start = time.monotonic()
            try:
                resp = self._client.post(url, json=self.payload(request))
            except httpx.HTTPError as exc:
                last = f"transport error: {exc}"
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise BackendError(request.tag, f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                data = resp.json()
                choice = data["choices"][0]
                text = choice["message"]["content"] or ""
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BackendError(request.tag, f"malformed response body: {exc}") from exc
            reason = "length" if choice.get("finish_reason") == "length" else "stop"
            return GenerationResult(request.tag, text, reason, time.monotonic() - start,
                                    data.get("usage"))
        raise BackendError(request.tag, f"giving up after {self.max_retries + 1} attempts ({last})")


# --------------------------------------------------------------------------
# batching


class RateLimiter:
    """Spaces request starts at least ``1/rate`` seconds apart."""

    def __init__(self, rate: float | None, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.interval = 1.0 / rate if rate else 0.0
        self._clock = clock
        self._sleep = sleep
        self._next: float | None = None
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = self._clock()
            slot = now if self._next is None else max(now, self._next)
            self._next = slot + self.interval
        wait = slot - now
        if wait > 0:
            self._sleep(wait)


class CompletionLedger:
    """Append-only JSONL of completed requests, keyed by tag."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._done: dict[str, dict] = {}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._done[rec["tag"]] = rec

    def __contains__(self, tag: str) -> bool:
        return tag in self._done

    def __len__(self) -> int:
        return len(self._done)

    def get(self, tag: str) -> dict | None:
        return self._done.get(tag)

    def records(self) -> dict[str, dict]:
        return dict(self._done)

    def append(self, result: GenerationResult) -> None:
        rec = {"tag": result.tag, "text": result.text, "finish_reason": result.finish_reason,
               "timestamp": time.time()}
        line = json.dumps(rec, ensure_ascii=False) + "\n"
        with self._lock:
            if result.tag in self._done:
                return
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
            self._done[result.tag] = rec


def generate_batch(backend: Backend, requests: Sequence[GenerationRequest], parallelism: int = 1,
                   rate_limit: float | None = None, ledger: CompletionLedger | None = None,
                   limiter: RateLimiter | None = None) -> list[GenerationResult]:
    """Run requests in order-preserving fashion. Failures become ``finish_reason='error'``."""
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    limiter = limiter or RateLimiter(rate_limit)

    def run(req: GenerationRequest) -> GenerationResult:
        if ledger is not None and req.tag in ledger:
            rec = ledger.get(req.tag)
            return GenerationResult(req.tag, rec["text"], rec["finish_reason"], cached=True)
        limiter.acquire()
        try:
            res = backend.generate(req)
        except Exception as exc:  # one failure must not poison the batch
            logger.warning("request %s failed: %s", req.tag, exc)
            return GenerationResult(req.tag, "", "error", error=str(exc))
        if ledger is not None:
            ledger.append(res)
        return res

    if parallelism == 1:
        return [run(r) for r in requests]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(run, requests))


def failed_tags(results: Sequence[GenerationResult]) -> list[str]:
    return [r.tag for r in results if r.finish_reason == "error"]
