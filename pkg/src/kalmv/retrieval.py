"""Ranking knowledge items against questions, sparse (BM25) or dense (cosine).

Both index kinds are exact full scans: corpora here are desk scale and an
exhaustive scan keeps ranking deterministic. ``retrieve_next`` serves the
rectification loop's "best item not yet tried" queries; ties break by item
insertion order. Sparse retrieval never returns a zero-score item, dense
retrieval has no cutoff.

BM25 is Okapi with k1=1.2, b=0.75 and the non-negative IDF
ln(1 + (N - df + 0.5) / (df + 0.5)).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from collections import Counter
from pathlib import Path

import numpy as np
import requests

from .corpus import KnowledgeItem, KnowledgeStore, tokenize

logger = logging.getLogger(__name__)

SNAPSHOT_FORMAT_VERSION = 1

SPARSE_BM25 = "sparse_bm25"
DENSE_COSINE = "dense_cosine"


class SnapshotError(ValueError):
    """Index snapshot is missing, unreadable, or has the wrong version."""


class TransportError(RuntimeError):
    """An HTTP endpoint stayed unreachable after the configured retries."""

    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempts)")
        self.attempts = attempts


class ExclusionSet:
    """Item ids already used within one question run. Grows monotonically."""

    def __init__(self, used_item_ids: set[str] | None = None):
        self._used: set[str] = set(used_item_ids or ())

    def add(self, item_id: str) -> None:
        self._used.add(item_id)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._used

    def __len__(self) -> int:
        return len(self._used)


class EmbeddingClient:
    """HTTP embedding endpoint with an in-memory cache keyed by text digest.

    Wire format: POST {"input": [text, ...]} returning
    {"data": [{"embedding": [...]}, ...]} in input order.
    """

    def __init__(
        self,
        url: str,
        api_key: str | None = None,
        retries: int = 2,
        timeout_s: float = 30.0,
        batch_size: int = 32,
    ):
        self.url = url
        self.api_key = api_key
        self.retries = retries
        self.timeout_s = timeout_s
        self.batch_size = batch_size
        self._cache: dict[str, np.ndarray] = {}

    @staticmethod
    def _digest(text: str) -> str:
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def _post(self, texts: list[str]) -> list[np.ndarray]:
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        attempts = self.retries + 1
        last_error: Exception | None = None
        for attempt in range(attempts):
            try:
                resp = requests.post(
                    self.url, json={"input": texts}, headers=headers, timeout=self.timeout_s
                )
                resp.raise_for_status()
                data = resp.json()["data"]
                return [np.asarray(row["embedding"], dtype=np.float64) for row in data]
            except (requests.RequestException, KeyError, ValueError) as exc:
                last_error = exc
                if attempt < attempts - 1:
                    time.sleep(0.05 * (attempt + 1))
        raise TransportError(f"embedding endpoint failed: {last_error}", attempts)

    def embed(self, text: str) -> np.ndarray:
        return self.embed_batch([text])[0]

    def embed_batch(self, texts: list[str]) -> list[np.ndarray]:
        missing = [t for t in texts if self._digest(t) not in self._cache]
        # preserve first-occurrence order, drop duplicates before the call
        missing = list(dict.fromkeys(missing))
        for start in range(0, len(missing), self.batch_size):
            chunk = missing[start : start + self.batch_size]
            vectors = self._post(chunk)
            if len(vectors) != len(chunk):
                raise TransportError(
                    f"embedding endpoint returned {len(vectors)} vectors for {len(chunk)} inputs",
                    attempts=1,
                )
            for text, vec in zip(chunk, vectors):
                self._cache[self._digest(text)] = vec
        return [self._cache[self._digest(t)] for t in texts]


def embed(text: str, endpoint: EmbeddingClient) -> np.ndarray:
    """Embed one text through the endpoint (cached by text digest)."""
    return endpoint.embed(text)


class RetrievalIndex:
    """Scores knowledge items against a question. Immutable after build."""

    def __init__(
        self,
        kind: str,
        store: KnowledgeStore,
        k1: float = 1.2,
        b: float = 0.75,
        vectors: np.ndarray | None = None,
        embedder: EmbeddingClient | None = None,
    ):
        if kind not in (SPARSE_BM25, DENSE_COSINE):
            raise ValueError(f"unknown index kind {kind!r}")
        self.kind = kind
        self.store = store
        self.k1 = k1
        self.b = b
        self.embedder = embedder
        self._pos: dict[str, int] = {item.item_id: i for i, item in enumerate(store)}
        if kind == SPARSE_BM25:
            self._term_freqs: list[Counter] = []
            self._doc_lens: list[int] = []
            df: Counter = Counter()
            for item in store:
                toks = tokenize(item.text)
                freqs = Counter(toks)
                self._term_freqs.append(freqs)
                self._doc_lens.append(len(toks))
                df.update(freqs.keys())
            total = sum(self._doc_lens)
            if len(store) > 0 and total == 0:
                raise ValueError("corpus tokenizes to nothing; cannot build a sparse index")
            self.avgdl = total / len(store) if len(store) else 0.0
            n = len(store)
            self._idf = {
                t: math.log(1.0 + (n - d + 0.5) / (d + 0.5)) for t, d in df.items()
            }
            self.vectors = None
        else:
            if vectors is None:
                raise ValueError("dense index requires item vectors")
            vectors = np.asarray(vectors, dtype=np.float64)
            if len(store) and vectors.shape[0] != len(store):
                raise ValueError("vector count does not match store size")
            if vectors.ndim != 2 and len(store):
                raise ValueError("dense vectors must share one dimensionality")
            self.vectors = vectors
            norms = np.linalg.norm(vectors, axis=1) if len(store) else np.array([])
            self._norms = np.where(norms == 0.0, 1.0, norms)

    def __len__(self) -> int:
        return len(self.store)

    @classmethod
    def build_sparse(cls, store: KnowledgeStore, k1: float = 1.2, b: float = 0.75) -> RetrievalIndex:
        return cls(SPARSE_BM25, store, k1=k1, b=b)

    @classmethod
    def build_dense(cls, store: KnowledgeStore, embedder: EmbeddingClient) -> RetrievalIndex:
        texts = [item.text for item in store]
        vectors = embedder.embed_batch(texts) if texts else []
        matrix = np.asarray(vectors, dtype=np.float64).reshape(len(texts), -1)
        return cls(DENSE_COSINE, store, vectors=matrix, embedder=embedder)

    def _bm25_at(self, query_tokens: list[str], pos: int) -> float:
        freqs = self._term_freqs[pos]
        dl = self._doc_lens[pos]
        denom_norm = self.k1 * (1.0 - self.b + self.b * dl / self.avgdl)
        score = 0.0
        for term in query_tokens:
            tf = freqs.get(term)
            if not tf:
                continue
            score += self._idf[term] * tf * (self.k1 + 1.0) / (tf + denom_norm)
        return score

    def _cosines(self, query_vec: np.ndarray) -> np.ndarray:
        if query_vec.shape[0] != self.vectors.shape[1]:
            raise ValueError(
                f"query embedding dimension {query_vec.shape[0]} does not match "
                f"index dimension {self.vectors.shape[1]}"
            )
        qnorm = np.linalg.norm(query_vec)
        if qnorm == 0.0:
            qnorm = 1.0
        return (self.vectors @ query_vec) / (self._norms * qnorm)

    def save(self, path: str | Path) -> None:
        payload: dict = {
            "format_version": SNAPSHOT_FORMAT_VERSION,
            "kind": self.kind,
            "k1": self.k1,
            "b": self.b,
            "items": [
                {"item_id": it.item_id, "source_kind": it.source_kind, "text": it.text}
                for it in self.store
            ],
        }
        if self.kind == DENSE_COSINE:
            payload["vectors"] = self.vectors.tolist()
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, ensure_ascii=False)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path, embedder: EmbeddingClient | None = None) -> RetrievalIndex:
        try:
            with open(path, encoding="utf-8") as fh:
                payload = json.load(fh)
        except FileNotFoundError:
            raise SnapshotError(f"index snapshot not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise SnapshotError(f"index snapshot is not valid JSON: {path}: {exc}") from exc
        version = payload.get("format_version")
        if version != SNAPSHOT_FORMAT_VERSION:
            raise SnapshotError(
                f"snapshot version {version!r} unsupported (expected {SNAPSHOT_FORMAT_VERSION})"
            )
        store = KnowledgeStore(
            [
                KnowledgeItem(item_id=it["item_id"], source_kind=it["source_kind"], text=it["text"])
                for it in payload["items"]
            ]
        )
        if payload["kind"] == DENSE_COSINE:
            vectors = np.asarray(payload["vectors"], dtype=np.float64)
            return cls(
                DENSE_COSINE,
                store,
                k1=payload["k1"],
                b=payload["b"],
                vectors=vectors,
                embedder=embedder,
            )
        return cls(SPARSE_BM25, store, k1=payload["k1"], b=payload["b"])


def bm25_score(query_tokens: list[str], item_id: str, index: RetrievalIndex) -> float:
    """Okapi BM25 score of one indexed item for a tokenized query."""
    if index.kind != SPARSE_BM25:
        raise ValueError("bm25_score requires a sparse_bm25 index")
    if item_id not in index._pos:
        raise KeyError(f"unknown item_id {item_id!r}")
    return index._bm25_at(query_tokens, index._pos[item_id])


def retrieve_next(
    question: str, index: RetrievalIndex, exclusions: ExclusionSet
) -> KnowledgeItem | None:
    """Highest-scoring item not in ``exclusions``; None once nothing useful is left.

    Sparse mode skips items whose score is zero (no matching terms); dense
    mode returns the best remaining cosine regardless of sign.
    """
    if index.kind == SPARSE_BM25:
        query_tokens = tokenize(question)
        best_pos = -1
        best_score = 0.0
        for pos, item in enumerate(index.store):
            if item.item_id in exclusions:
                continue
            score = index._bm25_at(query_tokens, pos)
            if score > best_score:
                best_score = score
                best_pos = pos
        if best_pos < 0:
            return None
        return index.store[best_pos]

    if len(index.store) == 0:
        return None
    query_vec = index.embedder.embed(question) if index.embedder else None
    if query_vec is None:
        raise ValueError("dense index has no embedder attached for query encoding")
    scores = index._cosines(np.asarray(query_vec, dtype=np.float64))
    best_pos = -1
    best_score = -math.inf
    for pos, item in enumerate(index.store):
        if item.item_id in exclusions:
            continue
        if scores[pos] > best_score:
            best_score = float(scores[pos])
            best_pos = pos
    if best_pos < 0:
        return None
    return index.store[best_pos]
