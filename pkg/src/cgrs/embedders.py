"""Sentence embedding providers for the reranking stage.

The hashing embedder is the deterministic local default: lowercase,
split on non-alphanumerics, each token adds one count at the dimension
given by its digest, L2-normalize. It is a stand-in for a pretrained
sentence encoder, so collisions are acceptable at dim >= 64 while
keeping every test reproducible across processes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
from typing import Optional, Sequence

import numpy as np
import requests

logger = logging.getLogger(__name__)

from .captions import _retry_sleep
from .exceptions import FormatError, ProviderError, ValidationError
from .io import iter_jsonl, read_embedding_file

EMBED_TOKEN_ENV = "CGRS_EMBED_TOKEN"

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on non-alphanumerics, drop empty tokens."""
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


def _token_dimension(token: str, dim: int) -> int:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % dim


class SentenceEmbedder:
    """Common surface: embed(text) -> vector of fixed dim with norm > 0."""

    embedder_id: str = "base"

    def __init__(self, dim: int):
        if dim < 1:
            raise ValidationError(f"embedder dim must be >= 1, got {dim}")
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValidationError("cannot embed empty text")
        vector = self._embed(text)
        if vector.shape != (self.dim,):
            raise ProviderError(
                f"embedder returned shape {vector.shape}, expected ({self.dim},)"
            )
        if not np.all(np.isfinite(vector)) or float(np.linalg.norm(vector)) == 0.0:
            raise ProviderError("embedder returned a degenerate vector")
        return vector

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self.embed(t) for t in texts]) if texts else np.zeros((0, self.dim))

    def _embed(self, text: str) -> np.ndarray:
        raise NotImplementedError


class HashingSentenceEmbedder(SentenceEmbedder):
    """Bag-of-tokens embedder over hashed dimensions; deterministic
    function of the token multiset (word order is irrelevant)."""

    embedder_id = "mock-hash"

    def __init__(self, dim: int = 384):
        super().__init__(dim)

    def _embed(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            raise ValidationError(f"text {text!r} has no alphanumeric tokens to embed")
        counts = np.zeros(self.dim, dtype=np.float64)
        for token in tokens:
            counts[_token_dimension(token, self.dim)] += 1.0
        return counts / np.linalg.norm(counts)


class FileSentenceEmbedder(SentenceEmbedder):
    """Precomputed embeddings: an embedding file plus a JSONL manifest
    mapping sha256(text) -> row_index."""

    embedder_id = "file"

    def __init__(self, manifest_path, embedding_path):
        dim, count, matrix = read_embedding_file(embedding_path)
        super().__init__(dim)
        self._matrix = matrix.astype(np.float64)
        self._rows: dict[str, int] = {}
        for lineno, obj in iter_jsonl(manifest_path):
            digest = obj.get("digest")
            row = obj.get("row_index")
            if not isinstance(digest, str) or not isinstance(row, int):
                raise FormatError(
                    "embedder manifest line must have string 'digest' and int 'row_index'",
                    path=manifest_path,
                    line=lineno,
                )
            if not 0 <= row < count:
                raise FormatError(
                    f"row_index {row} out of range [0, {count})",
                    path=manifest_path,
                    line=lineno,
                )
            self._rows[digest] = row

    @staticmethod
    def text_digest(text: str) -> str:
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def _embed(self, text: str) -> np.ndarray:
        digest = self.text_digest(text)
        if digest not in self._rows:
            raise ProviderError(f"no precomputed embedding for text digest {digest[:12]}...")
        return self._matrix[self._rows[digest]]


class HttpSentenceEmbedder(SentenceEmbedder):
    """Batch wire contract: POST {"texts": [...]} -> {"vectors": [[...]]}.
    Shares the caption client's retry policy (5xx and timeouts only);
    bearer token from CGRS_EMBED_TOKEN when set."""

    embedder_id = "http"

    def __init__(
        self,
        endpoint: str,
        dim: int,
        max_retries: int = 3,
        backoff_base_ms: int = 100,
        timeout_s: float = 30.0,
        session: Optional[requests.Session] = None,
    ):
        super().__init__(dim)
        if not endpoint:
            raise ValidationError("http embedder requires an endpoint")
        self.endpoint = endpoint
        self.max_retries = max_retries
        self.backoff_base_ms = backoff_base_ms
        self.timeout_s = timeout_s
        self._session = session or requests.Session()
        self._rng = random.Random()

    def _headers(self) -> dict[str, str]:
        token = os.environ.get(EMBED_TOKEN_ENV)
        return {"Authorization": f"Bearer {token}"} if token else {}

    def _post_batch(self, texts: Sequence[str]) -> np.ndarray:
        last_error = "unknown"
        for attempt in range(self.max_retries + 1):
            try:
                resp = self._session.post(
                    self.endpoint,
                    json={"texts": list(texts)},
                    headers=self._headers(),
                    timeout=self.timeout_s,
                )
            except (requests.Timeout, requests.ConnectionError) as exc:
                last_error = f"transport error: {exc}"
            else:
                if resp.status_code == 200:
                    try:
                        vectors = resp.json().get("vectors")
                    except json.JSONDecodeError:
                        vectors = None
                    if not isinstance(vectors, list) or len(vectors) != len(texts):
                        raise ProviderError("malformed embedder response")
                    return np.asarray(vectors, dtype=np.float64)
                if resp.status_code < 500:
                    raise ProviderError(
                        f"embedding request rejected with status {resp.status_code}"
                    )
                last_error = f"status {resp.status_code}"
            if attempt < self.max_retries:
                logger.warning(
                    "embedding request failed (%s); retry %d/%d",
                    last_error,
                    attempt + 1,
                    self.max_retries,
                )
                _retry_sleep(attempt, self.backoff_base_ms, self._rng)
        raise ProviderError(f"embedder unavailable after {self.max_retries} retries ({last_error})")

    def _embed(self, text: str) -> np.ndarray:
        return self._post_batch([text])[0]

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        if any(not t for t in texts):
            raise ValidationError("cannot embed empty text")
        matrix = self._post_batch(texts)
        for row in matrix:
            if not np.all(np.isfinite(row)) or float(np.linalg.norm(row)) == 0.0:
                raise ProviderError("embedder returned a degenerate vector")
        return matrix


def embed_text(embedder: SentenceEmbedder, text: str) -> np.ndarray:
    """Embed one text through the provider; deterministic for mock-hash."""
    return embedder.embed(text)
