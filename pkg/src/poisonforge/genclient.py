"""Clients for black-box generative services plus deterministic local mocks.

The HTTP clients speak two wire shapes:

* chat rewrite:  POST {model, messages:[{role, content}...]} -> {choices:[{message:{content}}]}
* translate:     POST {text, source, target} -> {text}

All network responses are cached on disk keyed by (generator id, template id,
input text), so warm-cache reruns issue zero network calls. Secrets are read
from the environment variable named in the client config (POISONFORGE_KEY_<ID>
by convention) and never stored anywhere.
"""

from __future__ import annotations

import json
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import requests

from poisonforge.errors import ConfigError, GenerationError, OfflineViolation
from poisonforge.hashing import content_key

CHAT_SYSTEM_PROMPT = "You are a linguistic expert on text rewriting."
REWRITE_TEMPLATE_ID = "rewrite-v1"

TRANSIENT_STATUS = {429, 500, 502, 503, 504}


def build_rewrite_prompt(text: str) -> str:
    return (
        f"Rewrite the paragraph: {text} without altering its original sentiment meaning. "
        "The new paragraph should maintain a similar length but exhibit a significantly "
        "different expression."
    )


@dataclass(frozen=True)
class RewriteResponse:
    text: str
    model_id: str
    latency_ms: float
    cached: bool = False
    token_counts: dict | None = None


@dataclass(frozen=True)
class ClientConfig:
    id: str
    kind: str  # chat_rewrite | translator | summarizer | mock
    endpoint: str = ""
    auth_env: str = ""
    rate_limit: float = 8.0
    max_retries: int = 2
    timeout: float = 30.0
    model: str = "gpt-3.5-turbo"
    backoff_base: float = 0.5
    decoding: dict = field(default_factory=dict)  # pass-through sampling params

    def __post_init__(self) -> None:
        if self.rate_limit <= 0:
            raise ConfigError(f"client {self.id!r}: rate_limit must be > 0")
        if self.max_retries < 0:
            raise ConfigError(f"client {self.id!r}: max_retries must be >= 0")
        if self.kind not in ("chat_rewrite", "translator", "summarizer", "mock"):
            raise ConfigError(f"client {self.id!r}: unknown kind {self.kind!r}")


class GenerationCache:
    """Disk-persisted content-addressed store; append-only JSONL, thread-safe."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, dict] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with self.path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    record = json.loads(line)
                    self._entries[record["key"]] = record

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: str) -> dict | None:
        return self._entries.get(key)

    def put(self, key: str, text: str, model_id: str, latency_ms: float) -> None:
        with self._lock:
            if key in self._entries:
                return
            record = {"key": key, "text": text, "model": model_id, "latency_ms": latency_ms}
            self._entries[key] = record
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record, ensure_ascii=False))
                    fh.write("\n")


class RateLimiter:
    """Caps issued requests at `rate` per any sliding 1-second window."""

    def __init__(self, rate: float, clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep):
        if rate <= 0:
            raise ConfigError("rate_limit must be > 0")
        self.rate = rate
        self._clock = clock
        self._sleep = sleep
        self._stamps: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                while self._stamps and self._stamps[0] <= now - 1.0:
                    self._stamps.popleft()
                if len(self._stamps) < self.rate:
                    self._stamps.append(now)
                    return
                wait = self._stamps[0] + 1.0 - now
            self._sleep(max(wait, 1e-4))


class HttpGeneratorClient:
    """Resilient HTTP client: cache-first, rate-limited, retried with exponential backoff."""

    def __init__(
        self,
        config: ClientConfig,
        cache: GenerationCache | None = None,
        offline: bool = False,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if config.kind == "mock":
            raise ConfigError(f"client {config.id!r}: mock kind has no HTTP backend")
        self.config = config
        self.id = config.id
        self.kind = config.kind
        self.cache = cache if cache is not None else GenerationCache()
        self.offline = offline
        self._sleep = sleep
        self._limiter = RateLimiter(config.rate_limit)
        self._session = requests.Session()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.auth_env:
            secret = os.environ.get(self.config.auth_env)
            if secret:
                headers["Authorization"] = f"Bearer {secret}"
        return headers

    def _post(self, payload: dict) -> dict:
        if self.offline:
            raise OfflineViolation(f"client {self.id!r}: network call attempted in offline mode")
        last_error: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt > 0:
                self._sleep(self.config.backoff_base * (2 ** (attempt - 1)))
            self._limiter.acquire()
            try:
                response = self._session.post(
                    self.config.endpoint, json=payload, headers=self._headers(), timeout=self.config.timeout
                )
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_error = exc
                continue
            if response.status_code in TRANSIENT_STATUS:
                last_error = GenerationError(f"client {self.id!r}: HTTP {response.status_code}")
                continue
            if response.status_code != 200:
                raise GenerationError(f"client {self.id!r}: HTTP {response.status_code}: {response.text[:200]}")
            try:
                return response.json()
            except ValueError as exc:
                raise GenerationError(f"client {self.id!r}: non-JSON response") from exc
        raise GenerationError(f"client {self.id!r}: failed after {self.config.max_retries + 1} attempts: {last_error}")

    def _cached_call(self, template_id: str, text: str, payload: dict, extract: Callable[[dict], str]) -> RewriteResponse:
        key = content_key(self.id, template_id, text)
        hit = self.cache.get(key)
        if hit is not None:
            return RewriteResponse(text=hit["text"], model_id=hit["model"], latency_ms=hit["latency_ms"], cached=True)
        start = time.perf_counter()
        body = self._post(payload)
        latency_ms = (time.perf_counter() - start) * 1000.0
        out = extract(body)
        if not isinstance(out, str) or not out.strip():
            raise GenerationError(f"client {self.id!r}: empty completion")
        model_id = body.get("model", self.config.model) if isinstance(body, dict) else self.config.model
        self.cache.put(key, out, model_id, latency_ms)
        return RewriteResponse(text=out, model_id=model_id, latency_ms=latency_ms, cached=False)

    def rewrite(self, text: str, template_id: str = REWRITE_TEMPLATE_ID) -> RewriteResponse:
        if self.kind == "chat_rewrite":
            payload = {
                "model": self.config.model,
                "messages": [
                    {"role": "system", "content": CHAT_SYSTEM_PROMPT},
                    {"role": "user", "content": build_rewrite_prompt(text)},
                ],
            }
            payload.update(self.config.decoding)
            return self._cached_call(template_id, text, payload, _extract_chat_content)
        if self.kind == "summarizer":
            return self._cached_call(f"summarize:{template_id}", text, {"text": text}, _extract_plain_text)
        raise ConfigError(f"client {self.id!r} of kind {self.kind!r} cannot rewrite")

    def translate(self, text: str, src: str, tgt: str, salt: str = "") -> RewriteResponse:
        if self.kind != "translator":
            raise ConfigError(f"client {self.id!r} of kind {self.kind!r} cannot translate")
        if src == tgt:
            raise ConfigError(f"client {self.id!r}: source and target language are both {src!r}")
        payload = {"text": text, "source": src, "target": tgt}
        template_id = f"translate:{src}->{tgt}" + (f"#{salt}" if salt else "")
        return self._cached_call(template_id, text, payload, _extract_plain_text)


def _extract_chat_content(body: dict) -> str:
    try:
        return body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise GenerationError(f"malformed chat completion response: {exc}") from exc


def _extract_plain_text(body: dict) -> str:
    text = body.get("text") if isinstance(body, dict) else None
    if text is None:
        raise GenerationError("malformed response: missing 'text'")
    return text


# ---------------------------------------------------------------------------
# Deterministic local mocks
# ---------------------------------------------------------------------------

_PUNCT = ".,!?;:\"'()[]{}"


def _load_bundled_table() -> dict[str, str]:
    table: dict[str, str] = {}
    path = resources.files("poisonforge").joinpath("data/paraphrase_table.tsv")
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        src, dst = line.split("\t")
        table[src] = dst
    return table


_TABLES: dict[str, dict[str, str]] = {}


def get_table(table_id: str = "default") -> dict[str, str]:
    if table_id == "default" and "default" not in _TABLES:
        _TABLES["default"] = _load_bundled_table()
    try:
        return _TABLES[table_id]
    except KeyError:
        raise ConfigError(f"unknown substitution table {table_id!r}") from None


def register_table(table_id: str, table: dict[str, str]) -> None:
    _TABLES[table_id] = dict(table)


def _match_case(replacement: str, original: str) -> str:
    if original.isupper() and len(original) > 1:
        return replacement.upper()
    if original[:1].isupper():
        return replacement[:1].upper() + replacement[1:]
    return replacement


def mock_paraphrase(text: str, table_id: str = "default") -> str:
    """Word-level substitution over a registered table, case-preserving.

    Every token whose punctuation-stripped core maps through the table is
    replaced; everything else passes through untouched. With the bundled
    table (range disjoint from domain) the function is idempotent.
    """
    table = get_table(table_id)
    out: list[str] = []
    for token in text.split():
        core = token.strip(_PUNCT)
        replacement = table.get(core.lower()) if core else None
        if replacement is None:
            out.append(token)
            continue
        start = token.index(core)
        prefix, suffix = token[:start], token[start + len(core):]
        out.append(prefix + _match_case(replacement, core) + suffix)
    return " ".join(out)


class MockParaphraseClient:
    """Local stand-in for a generative rewriter; no network, fully deterministic."""

    kind = "mock"

    def __init__(self, id: str = "mock", table_id: str = "default"):
        self.id = id
        self.table_id = table_id
        get_table(table_id)  # fail fast on unknown table

    def rewrite(self, text: str, template_id: str = REWRITE_TEMPLATE_ID) -> RewriteResponse:
        return RewriteResponse(text=mock_paraphrase(text, self.table_id), model_id=f"mock-table:{self.table_id}", latency_ms=0.0)

    def translate(self, text: str, src: str, tgt: str, salt: str = "") -> RewriteResponse:
        raise ConfigError(f"client {self.id!r} is a paraphrase mock, not a translator")


class MockTranslatorClient:
    """Local translator mock; `identity` echoes, `reverse` flips word order each call."""

    kind = "mock"

    def __init__(self, id: str = "mock-mt", mode: str = "identity"):
        if mode not in ("identity", "reverse"):
            raise ConfigError(f"unknown mock translator mode {mode!r}")
        self.id = id
        self.mode = mode

    def rewrite(self, text: str, template_id: str = REWRITE_TEMPLATE_ID) -> RewriteResponse:
        raise ConfigError(f"client {self.id!r} is a translator mock, not a rewriter")

    def translate(self, text: str, src: str, tgt: str, salt: str = "") -> RewriteResponse:
        if src == tgt:
            raise ConfigError(f"client {self.id!r}: source and target language are both {src!r}")
        out = " ".join(reversed(text.split())) if self.mode == "reverse" else text
        return RewriteResponse(text=out, model_id=f"mock-mt:{self.mode}", latency_ms=0.0)


class FailingClient:
    """Mock that always fails; exercises the skip-on-generator-failure policy."""

    kind = "mock"

    def __init__(self, id: str = "mock-fail"):
        self.id = id
        self.calls = 0

    def rewrite(self, text: str, template_id: str = REWRITE_TEMPLATE_ID) -> RewriteResponse:
        self.calls += 1
        raise GenerationError(f"client {self.id!r}: simulated failure")

    def translate(self, text: str, src: str, tgt: str, salt: str = "") -> RewriteResponse:
        self.calls += 1
        raise GenerationError(f"client {self.id!r}: simulated failure")


class GeneratorRegistry:
    """Name-to-client lookup shared by the trigger layer and the CLI."""

    def __init__(self) -> None:
        self._clients: dict[str, object] = {}

    def register(self, client) -> None:
        self._clients[client.id] = client

    def get(self, generator_id: str):
        if not self._clients:
            raise ConfigError("no generator clients registered")
        try:
            return self._clients[generator_id]
        except KeyError:
            raise ConfigError(
                f"generator {generator_id!r} not registered (have {sorted(self._clients)})"
            ) from None

    def __contains__(self, generator_id: str) -> bool:
        return generator_id in self._clients


def chat_rewrite(client, text: str) -> RewriteResponse:
    """Issue one rewrite through a chat-capable client (cache-first)."""
    if client.kind not in ("chat_rewrite", "summarizer", "mock"):
        raise ConfigError(f"client {client.id!r} of kind {client.kind!r} cannot rewrite")
    return client.rewrite(text)


def translate(client, text: str, src: str, tgt: str) -> RewriteResponse:
    """Issue one translation call through a translator client."""
    if src == tgt:
        raise ConfigError(f"source and target language are both {src!r}")
    return client.translate(text, src, tgt)
