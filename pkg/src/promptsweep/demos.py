"""Retrieval of one-shot demonstrations by embedding similarity."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import threading
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import httpx
import numpy as np

from .inference import EndpointError, with_retries
from .templates import FormatRequirement

log = logging.getLogger(__name__)


class DemoError(ValueError):
    pass


@dataclass(frozen=True)
class Demonstration:
    src: str
    hyp: str
    gold: float
    embedding: np.ndarray = field(repr=False, compare=False)
    gold_range: tuple[float, float] = (0.0, 1.0)
    score_text: str | None = None


@dataclass
class DemoPool:
    task: str
    items: list[Demonstration]
    embed_dim: int

    def __post_init__(self):
        for i, item in enumerate(self.items):
            if item.embedding.shape != (2 * self.embed_dim,):
                raise DemoError(f"pool item {i}: embedding shape {item.embedding.shape}, "
                                f"expected ({2 * self.embed_dim},)")
            if not np.all(np.isfinite(item.embedding)):
                raise DemoError(f"pool item {i}: non-finite embedding")

    @property
    def matrix(self) -> np.ndarray:
        return np.stack([item.embedding for item in self.items])


class Embedder:
    """Text embedder with a per-(model, text) cache.

    ``encode`` maps a batch of texts to vectors; subclasses or callers provide
    it. ``embed`` adds validation and caching.
    """

    model_id = "embedder"
    dim: int

    def __init__(self):
        self._cache: dict[tuple[str, str], np.ndarray] = {}
        self._lock = threading.Lock()

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        raise NotImplementedError

    def _key(self, text: str) -> tuple[str, str]:
        return self.model_id, hashlib.sha256(text.encode("utf-8")).hexdigest()

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise DemoError("cannot embed empty text")
        key = self._key(text)
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        vec = np.asarray(self.encode([text])[0], dtype=np.float64)
        if vec.shape != (self.dim,):
            raise DemoError(f"{self.model_id}: got vector of shape {vec.shape}, expected ({self.dim},)")
        vec.setflags(write=False)
        with self._lock:
            self._cache[key] = vec
        return vec

    def embed_pair(self, src: str, hyp: str) -> np.ndarray:
        return np.concatenate([self.embed(src), self.embed(hyp)])


class HashingEmbedder(Embedder):
    """Deterministic offline embedder from hashed character trigrams.

    Not a semantic model; it exists so retrieval can run without a server.
    """

    def __init__(self, dim: int = 64):
        super().__init__()
        self.dim = dim
        self.model_id = f"hashing-{dim}"

    def encode(self, texts):
        out = np.zeros((len(texts), self.dim))
        for row, text in enumerate(texts):
            padded = f"  {text.lower()} "
            for i in range(len(padded) - 2):
                h = int.from_bytes(hashlib.blake2b(padded[i:i + 3].encode("utf-8"), digest_size=4).digest(), "big")
                out[row, h % self.dim] += 1.0 if (h >> 31) & 1 else -1.0
        return out


class EndpointEmbedder(Embedder):
    """Embeddings from an OpenAI-compatible ``/embeddings`` route."""

    def __init__(self, base_url: str, model_id: str, dim: int, api_key: str | None = None,
                 retries: int = 2, backoff_base: float = 1.0, timeout: float = 60.0,
                 transport: httpx.BaseTransport | None = None):
        super().__init__()
        self.model_id = model_id
        self.dim = dim
        self.retries = retries
        self.backoff_base = backoff_base
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.client = httpx.Client(base_url=base_url.rstrip("/"), headers=headers,
                                   timeout=timeout, transport=transport)

    def _post(self, texts):
        try:
            resp = self.client.post("/embeddings", json={"model": self.model_id, "input": list(texts)})
        except httpx.HTTPError as exc:
            raise EndpointError(str(exc)) from exc
        if resp.status_code >= 400:
            raise EndpointError(f"HTTP {resp.status_code}", retryable=resp.status_code >= 500 or resp.status_code == 429)
        data = sorted(resp.json()["data"], key=lambda d: d.get("index", 0))
        return np.array([d["embedding"] for d in data], dtype=np.float64)

    def encode(self, texts):
        result, _ = with_retries(lambda: self._post(texts), self.retries, self.backoff_base)
        return result


def cosine_similarities(query: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    qn = np.linalg.norm(query)
    if qn == 0:
        raise DemoError("query embedding is all zeros; cosine similarity undefined")
    norms = np.linalg.norm(matrix, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        sims = matrix @ query / (norms * qn)
    # zero-norm pool items can never be selected
    return np.where(norms > 0, sims, -np.inf)


def select_by_vector(query: np.ndarray, pool: DemoPool) -> tuple[int, float]:
    if not pool.items:
        raise DemoError("demonstration pool is empty")
    sims = cosine_similarities(np.asarray(query, dtype=np.float64), pool.matrix)
    idx = int(np.argmax(sims))  # first maximum = lowest index
    return idx, float(sims[idx])


def select_demo(segment, pool: DemoPool, embedder: Embedder) -> Demonstration:
    query = embedder.embed_pair(segment.source, segment.hypothesis)
    idx, _ = select_by_vector(query, pool)
    return pool.items[idx]


def format_demo_score(gold: float, pool_range: tuple[float, float], fmt: FormatRequirement) -> str:
    """Express a pool-native gold score in the answer space of ``fmt``.

    Numeric formats get a linear rescale (integers for discrete ranges, one
    decimal for continuous ones). Label formats split the pool range into
    equal-width bands, one per label, lowest band first.
    """
    lo, hi = pool_range
    if not lo < hi:
        raise DemoError("pool range needs lo < hi")
    if gold < lo or gold > hi:
        log.warning("demo gold %s outside pool range [%s, %s]; clamped", gold, lo, hi)
        gold = min(hi, max(lo, gold))
    frac = (gold - lo) / (hi - lo)
    if fmt.is_labels:
        labels = list(fmt.label_set)
        return labels[min(int(frac * len(labels)), len(labels) - 1)]
    flo, fhi = fmt.numeric_range
    value = flo + frac * (fhi - flo)
    if fmt.kind == "discrete_range":
        return str(int(math.floor(value + 0.5)))
    text = f"{value:.1f}"
    return "0.0" if text == "-0.0" else text


def _sidecar(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".emb.npy")


def load_pool(path: str | Path, task: str, embedder: Embedder | None = None,
              gold_range: tuple[float, float] | None = None, gold_column: str = "gold",
              source_column: str = "source", hypothesis_column: str = "hypothesis") -> DemoPool:
    """Load a TSV pool and its embedding sidecar (``<pool>.emb.npy``).

    Missing or stale sidecars are rebuilt with ``embedder`` and written back.
    ``gold_range`` defaults to the observed min and max of the pool.
    """
    path = Path(path)
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            rows.append((row[source_column], row[hypothesis_column], float(row[gold_column])))
    if not rows:
        raise DemoError(f"{path}: empty pool")
    if gold_range is None:
        golds = [r[2] for r in rows]
        gold_range = (min(golds), max(golds))
    sidecar = _sidecar(path)
    vectors = None
    if sidecar.exists():
        vectors = np.load(sidecar)
        if vectors.ndim != 2 or vectors.shape[0] != len(rows):
            log.warning("%s: sidecar has %s rows for %d pool items; rebuilding", sidecar, vectors.shape, len(rows))
            vectors = None
        elif embedder is not None and vectors.shape[1] != 2 * embedder.dim:
            raise DemoError(f"{sidecar}: dimension {vectors.shape[1] // 2} does not match embedder ({embedder.dim})")
    if vectors is None:
        if embedder is None:
            raise DemoError(f"{path}: no embedding sidecar and no embedder to build one")
        vectors = np.stack([embedder.embed_pair(s, h) for s, h, _ in rows])
        np.save(sidecar, vectors)
    items = [Demonstration(s, h, g, vectors[i], gold_range) for i, (s, h, g) in enumerate(rows)]
    return DemoPool(task, items, vectors.shape[1] // 2)


def pool_from_items(task: str, rows: Sequence[tuple[str, str, float]], embedder: Embedder,
                    gold_range: tuple[float, float] | None = None) -> DemoPool:
    if gold_range is None:
        golds = [r[2] for r in rows]
        gold_range = (min(golds), max(golds))
    items = [Demonstration(s, h, g, embedder.embed_pair(s, h), gold_range) for s, h, g in rows]
    return DemoPool(task, items, embedder.dim)


class DemoSelector:
    """Per-task pools plus memoized selection for repeated segments."""

    def __init__(self, pools: dict[str, DemoPool], embedder: Embedder):
        self.pools = pools
        self.embedder = embedder
        self._memo: dict[tuple[str, str], Demonstration] = {}

    def __call__(self, segment) -> Demonstration:
        key = (segment.task, segment.id)
        demo = self._memo.get(key)
        if demo is None:
            pool = self.pools.get(segment.task)
            if pool is None:
                raise DemoError(f"no demonstration pool for task {segment.task!r}")
            demo = select_demo(segment, pool, self.embedder)
            self._memo[key] = demo
        return demo

