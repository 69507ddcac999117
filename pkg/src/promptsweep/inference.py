"""Completion dispatch: request hashing, a content-addressed cache, HTTP
retries, bounded fan-out, and a deterministic mock judge for offline runs."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Protocol

import httpx
import numpy as np

log = logging.getLogger(__name__)

DEFAULT_MAX_TOKENS = 180
STATUSES = ("ok", "endpoint_error", "truncated")
RETRYABLE_STATUS = {408, 409, 429, 500, 502, 503, 504}


def stable_int(*parts: object) -> int:
    digest = hashlib.blake2b("\x1f".join(map(str, parts)).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


@dataclass(frozen=True)
class GenerationRequest:
    model_id: str
    prompt: str
    max_tokens: int = DEFAULT_MAX_TOKENS
    temperature: float = 0.0
    stop: tuple[str, ...] | None = None
    route: str = "completions"

    def __post_init__(self):
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")
        if self.route not in ("completions", "chat"):
            raise ValueError(f"unknown route {self.route!r}")

    @property
    def params_hash(self) -> str:
        payload = json.dumps(
            [self.model_id, self.prompt, self.max_tokens, self.temperature,
             list(self.stop) if self.stop else None, self.route],
            ensure_ascii=False, separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class GenerationRecord:
    params_hash: str
    raw_output: str | None
    status: str
    attempt_count: int
    created_at: str
    completion_tokens: int | None = None
    error: str | None = None

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if self.status == "ok" and self.raw_output is None:
            raise ValueError("ok records need raw_output")
        if self.attempt_count < 1:
            raise ValueError("attempt_count must be >= 1")

    @property
    def complete(self) -> bool:
        return self.status != "endpoint_error"

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> GenerationRecord:
        return cls(**json.loads(line))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class RecordCache:
    """Append-only record log with a sidecar offset index.

    ``records.jsonl`` holds one JSON record per line; ``index.tsv`` maps a
    params hash to the byte offset and length of its latest record. A record
    that fails to parse, or whose hash does not match, is treated as absent;
    the rest of the log stays usable. Safe for concurrent use within a process.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.log_path = self.directory / "records.jsonl"
        self.index_path = self.directory / "index.tsv"
        self._lock = threading.Lock()
        self._index: dict[str, tuple[int, int]] = {}
        self._load_index()

    def _load_index(self) -> None:
        self.log_path.touch(exist_ok=True)
        covered = 0
        if self.index_path.exists():
            with open(self.index_path, encoding="utf-8") as fh:
                for line in fh:
                    parts = line.rstrip("\n").split("\t")
                    if len(parts) != 3:
                        continue
                    try:
                        offset, length = int(parts[1]), int(parts[2])
                    except ValueError:
                        continue
                    self._index[parts[0]] = (offset, length)
                    covered = max(covered, offset + length)
        size = self.log_path.stat().st_size
        if covered < size:
            self._scan_from(covered)

    def _scan_from(self, start: int) -> None:
        # rebuild index entries for log bytes the index does not cover
        with open(self.log_path, "rb") as fh, open(self.index_path, "a", encoding="utf-8") as ix:
            fh.seek(start)
            offset = start
            for raw in fh:
                length = len(raw)
                try:
                    rec = GenerationRecord.from_json(raw.decode("utf-8"))
                except (ValueError, TypeError, UnicodeDecodeError):
                    log.warning("cache: skipping corrupt record at byte %d", offset)
                else:
                    self._index[rec.params_hash] = (offset, length)
                    ix.write(f"{rec.params_hash}\t{offset}\t{length}\n")
                offset += length

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, params_hash: str) -> bool:
        return self.get(params_hash) is not None

    def get(self, params_hash: str) -> GenerationRecord | None:
        loc = self._index.get(params_hash)
        if loc is None:
            return None
        offset, length = loc
        with open(self.log_path, "rb") as fh:
            fh.seek(offset)
            raw = fh.read(length)
        try:
            rec = GenerationRecord.from_json(raw.decode("utf-8"))
        except (ValueError, TypeError, UnicodeDecodeError):
            log.warning("cache: record %s is corrupt, ignoring", params_hash[:12])
            return None
        return rec if rec.params_hash == params_hash else None

    def put(self, record: GenerationRecord) -> bool:
        """Append ``record``; returns False if a complete record already exists."""
        line = (record.to_json() + "\n").encode("utf-8")
        with self._lock:
            existing = self.get(record.params_hash)
            if existing is not None and existing.complete:
                return False
            with open(self.log_path, "ab") as fh:
                offset = fh.tell()
                fh.write(line)
            with open(self.index_path, "a", encoding="utf-8") as ix:
                ix.write(f"{record.params_hash}\t{offset}\t{len(line)}\n")
            self._index[record.params_hash] = (offset, len(line))
        return True

    def records(self) -> Iterable[GenerationRecord]:
        for h in list(self._index):
            rec = self.get(h)
            if rec is not None:
                yield rec


@dataclass
class Completion:
    text: str
    finish_reason: str | None = None
    completion_tokens: int | None = None


class EndpointError(RuntimeError):
    def __init__(self, message: str, retryable: bool = True):
        super().__init__(message)
        self.retryable = retryable


class Backend(Protocol):
    def complete(self, request: GenerationRequest, context: Any = None) -> Completion: ...


def with_retries(call: Callable[[], Any], retries: int, backoff_base: float,
                 sleep: Callable[[float], None] = time.sleep) -> tuple[Any, int]:
    """Run ``call`` with exponential backoff; returns (result, attempts).

    Raises the last EndpointError once ``retries`` extra attempts are spent
    or the error is not retryable. The exception carries ``attempts``.
    """
    attempt = 0
    while True:
        attempt += 1
        try:
            return call(), attempt
        except EndpointError as exc:
            if not exc.retryable or attempt > retries:
                exc.attempts = attempt
                raise
            delay = backoff_base * (2 ** (attempt - 1))
            log.debug("attempt %d failed (%s); retrying in %.2fs", attempt, exc, delay)
            if delay > 0:
                sleep(delay)


class OpenAIHTTPBackend:
    """Talks to an OpenAI-compatible server (vLLM, TGI, llama.cpp, ...).

    Uses ``/completions`` or ``/chat/completions`` depending on the request
    route; chat requests send the rendered prompt as a single user turn.
    """

    def __init__(self, base_url: str, api_key: str | None = None, api_key_env: str = "OPENAI_API_KEY",
                 timeout: float = 120.0, transport: httpx.BaseTransport | None = None):
        key = api_key if api_key is not None else os.environ.get(api_key_env, "")
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self.base_url = base_url.rstrip("/")
        self.client = httpx.Client(base_url=self.base_url, headers=headers, timeout=timeout,
                                   transport=transport)

    def complete(self, request: GenerationRequest, context: Any = None) -> Completion:
        body: dict[str, Any] = {
            "model": request.model_id,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        }
        if request.stop:
            body["stop"] = list(request.stop)
        if request.route == "chat":
            path = "/chat/completions"
            body["messages"] = [{"role": "user", "content": request.prompt}]
        else:
            path = "/completions"
            body["prompt"] = request.prompt
        try:
            resp = self.client.post(path, json=body)
        except httpx.HTTPError as exc:
            raise EndpointError(f"{type(exc).__name__}: {exc}") from exc
        if resp.status_code >= 400:
            raise EndpointError(f"HTTP {resp.status_code}: {resp.text[:200]}",
                                retryable=resp.status_code in RETRYABLE_STATUS)
        try:
            data = resp.json()
            choice = data["choices"][0]
            text = choice["message"]["content"] if request.route == "chat" else choice["text"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise EndpointError(f"malformed response: {exc}", retryable=False) from exc
        usage = data.get("usage") or {}
        return Completion(text or "", choice.get("finish_reason"), usage.get("completion_tokens"))

    def close(self) -> None:
        self.client.close()


class Generator:
    """Cache-first dispatcher with retries and a bounded worker pool."""

    def __init__(self, backend: Backend, cache: RecordCache, concurrency: int = 4,
                 retries: int = 2, backoff_base: float = 1.0,
                 sleep: Callable[[float], None] = time.sleep):
        if concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        self.backend = backend
        self.cache = cache
        self.concurrency = concurrency
        self.retries = retries
        self.backoff_base = backoff_base
        self.sleep = sleep
        self.network_calls = 0
        self.peak_in_flight = 0
        self._in_flight = 0
        self._lock = threading.Lock()

    def _call(self, request: GenerationRequest, context: Any) -> Completion:
        with self._lock:
            self.network_calls += 1
            self._in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self._in_flight)
        try:
            return self.backend.complete(request, context)
        finally:
            with self._lock:
                self._in_flight -= 1

    def lookup(self, request: GenerationRequest) -> GenerationRecord | None:
        rec = self.cache.get(request.params_hash)
        return rec if rec is not None and rec.complete else None

    def generate(self, request: GenerationRequest, context: Any = None) -> tuple[GenerationRecord, bool]:
        """Return (record, cache_hit). Failed attempts yield a persisted endpoint_error record."""
        cached = self.lookup(request)
        if cached is not None:
            return cached, True
        try:
            completion, attempts = with_retries(lambda: self._call(request, context),
                                                self.retries, self.backoff_base, self.sleep)
        except EndpointError as exc:
            record = GenerationRecord(request.params_hash, None, "endpoint_error",
                                      getattr(exc, "attempts", 1), _now(), error=str(exc))
        else:
            status = "truncated" if completion.finish_reason == "length" else "ok"
            record = GenerationRecord(request.params_hash, completion.text, status, attempts, _now(),
                                      completion.completion_tokens)
        if not self.cache.put(record):
            # another worker finished the same request first
            return self.cache.get(request.params_hash), True
        return record, False

    def generate_many(self, requests: Sequence[GenerationRequest],
                      contexts: Sequence[Any] | None = None) -> list[tuple[GenerationRecord, bool]]:
        contexts = contexts if contexts is not None else [None] * len(requests)
        if self.concurrency == 1:
            return [self.generate(r, c) for r, c in zip(requests, contexts)]
        with ThreadPoolExecutor(max_workers=self.concurrency) as pool:
            return list(pool.map(self.generate, requests, contexts))


def mock_judge(segment, fmt, sigma: float, seed: int,
               gold_range: tuple[float, float] = (0.0, 1.0)) -> str:
    """Emit a judgment whose final score tracks ``segment.gold``.

    Gold is mapped to [0, 1] within ``gold_range``, perturbed by Gaussian noise
    of standard deviation ``sigma`` (in those normalized units), clamped, and
    rescaled to the format's answer space. Numeric answers are printed with
    full precision so that sigma=0 preserves the gold ordering exactly.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    lo, hi = gold_range
    frac = (segment.gold - lo) / (hi - lo) if hi > lo else 0.5
    rng = np.random.default_rng([seed, stable_int(segment.id), stable_int(fmt.id)])
    noise = rng.normal(0.0, sigma) if sigma > 0 else 0.0
    frac = min(1.0, max(0.0, frac + noise))
    issues = int(rng.integers(0, 4))
    lead = f"I read the source and the candidate carefully and noted {issues} possible issue(s). "
    if fmt.is_labels:
        labels = list(fmt.label_set)
        idx = min(int(frac * len(labels)), len(labels) - 1)
        return lead + f"Overall the text is {labels[idx]}.\nJudgment: {labels[idx]}"
    flo, fhi = fmt.numeric_range
    value = flo + frac * (fhi - flo)
    text = f"{value:.6f}".rstrip("0").rstrip(".")
    if text in ("-0", ""):
        text = "0"
    return lead + f"Weighing these points, my final answer follows.\nJudgment: {text}"


class MockJudgeBackend:
    """Backend that answers from ``mock_judge``; needs the job as context.

    The context must expose ``segment``, ``fmt`` and ``gold_range``.
    """

    def __init__(self, sigma: float = 0.0, seed: int = 0):
        self.sigma = sigma
        self.seed = seed

    def complete(self, request: GenerationRequest, context: Any = None) -> Completion:
        if context is None:
            raise EndpointError("mock judge needs job context", retryable=False)
        text = mock_judge(context.segment, context.fmt, self.sigma, self.seed, context.gold_range)
        return Completion(text, "stop", math.ceil(len(text) / 4))


@dataclass
class EndpointConfig:
    base_url: str = "http://localhost:8000/v1"
    api_key_env: str = "OPENAI_API_KEY"
    route: str = "completions"
    timeout: float = 120.0
    concurrency: int = 4
    retries: int = 2
    backoff_base: float = 1.0
    max_tokens: int = DEFAULT_MAX_TOKENS
    temperature: float = 0.0
    stop: list[str] | None = field(default=None)
