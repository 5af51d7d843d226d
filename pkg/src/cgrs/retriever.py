"""Stage one: exact cosine scan and top-k selection over the gallery.

Scores are raw cosines (no softmax calibration, no temperature); ties are
broken by ascending image_id so results are fully deterministic and a
full-sort oracle can check them exactly. Selection runs per shard with a
bounded partial sort, then merges; the score vector is computed once per
query, so the output is bit-identical for any shard count.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import ValidationError
from .store import GalleryStore, ShardView, build_store, shard
from .types import CoarseResult, RankedCandidate
from .validation import check_embedding_vector

# Cosine of valid embeddings can overshoot +/-1 only by rounding error;
# anything beyond this indicates corrupted inputs.
_COSINE_OVERSHOOT_TOL = 1e-6


def _clamp_cosine(value: float, context: str) -> float:
    if value > 1.0:
        if value - 1.0 > _COSINE_OVERSHOOT_TOL:
            raise ValidationError(f"{context}: cosine {value} exceeds 1 beyond tolerance")
        return 1.0
    if value < -1.0:
        if -1.0 - value > _COSINE_OVERSHOOT_TOL:
            raise ValidationError(f"{context}: cosine {value} below -1 beyond tolerance")
        return -1.0
    return value


def cosine_similarity(a, b) -> float:
    """Cosine of two embeddings: dot(a, b) / (||a|| * ||b||), clamped into
    [-1, 1] only within rounding tolerance."""
    va = check_embedding_vector(a, name="a")
    vb = check_embedding_vector(b, name="b")
    if va.shape[0] != vb.shape[0]:
        raise ValidationError(f"dimension mismatch: {va.shape[0]} vs {vb.shape[0]}")
    value = float(np.dot(va, vb) / (np.linalg.norm(va) * np.linalg.norm(vb)))
    return _clamp_cosine(value, "cosine_similarity")


def score_gallery(store: GalleryStore, query) -> np.ndarray:
    """Cosine of the query against every gallery row, as one float64
    vector aligned with matrix rows."""
    q = check_embedding_vector(query, name="query")
    if q.shape[0] != store.dim:
        raise ValidationError(f"query dim {q.shape[0]} does not match store dim {store.dim}")
    qnorm = float(np.linalg.norm(q))
    # einsum keeps the per-row summation order identical for every row
    # (BLAS gemv does not), so duplicated rows tie bit-exactly and the
    # id tie-break stays deterministic under query rescaling
    scores = np.einsum("ij,j->i", store.matrix, q) / (store.norms * qnorm)
    np.clip(scores, -1.0, 1.0, out=scores)
    return scores


def _select_top_rows(scores: np.ndarray, ids: Sequence[str], view: ShardView, k: int) -> list[int]:
    """Exact top-k rows within one shard under the (-score, image_id)
    total order. Uses a partial selection: only rows at or above the kth
    score value are sorted."""
    m = view.size
    if m == 0:
        return []
    kk = min(k, m)
    segment = scores[view.lo : view.hi]
    if kk < m:
        threshold = np.partition(segment, m - kk)[m - kk]
        rows = view.lo + np.flatnonzero(segment >= threshold)
    else:
        rows = np.arange(view.lo, view.hi)
    ranked = sorted(rows.tolist(), key=lambda r: (-scores[r], ids[r]))
    return ranked[:kk]


def retrieve_topk(
    store: GalleryStore, query, k: int, n_shards: int = 1
) -> list[RankedCandidate]:
    """The k highest-cosine gallery rows for one query, descending, ties
    by ascending image_id. Returns all rows when k >= gallery size."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if store.count == 0:
        raise ValidationError("cannot retrieve from an empty store")
    scores = score_gallery(store, query)
    ids = store.image_ids
    merged: list[int] = []
    for view in shard(store, n_shards):
        merged.extend(_select_top_rows(scores, ids, view, k))
    merged.sort(key=lambda r: (-scores[r], ids[r]))
    top = merged[: min(k, store.count)]
    return [
        RankedCandidate(image_id=ids[r], score=float(scores[r]), rank=i + 1)
        for i, r in enumerate(top)
    ]


def retrieve_batch(
    store: GalleryStore,
    queries,
    k: int,
    n_shards: int = 1,
    query_ids: Optional[Sequence[str]] = None,
) -> list[CoarseResult]:
    """Per-query top-k over a query matrix; element i is exactly
    retrieve_topk on row i, in input order."""
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2:
        raise ValidationError(f"queries must be a 2-D matrix, got shape {q.shape}")
    if query_ids is None:
        query_ids = [f"q{i}" for i in range(q.shape[0])]
    if len(query_ids) != q.shape[0]:
        raise ValidationError(
            f"{len(query_ids)} query ids for {q.shape[0]} query rows"
        )
    return [
        CoarseResult(query_id=qid, candidates=tuple(retrieve_topk(store, row, k, n_shards)))
        for qid, row in zip(query_ids, q)
    ]


class CoarseRetriever(BaseEstimator):
    """Estimator wrapper around the exact top-k scan.

    Follows the fit/predict convention: ``fit`` indexes the gallery,
    ``predict`` returns ranked candidate lists for query embeddings.
    """

    def __init__(self, k: int = 20, n_shards: int = 1):
        self.k = k
        self.n_shards = n_shards

    def fit(self, records, matrix=None):
        """Index a gallery. Accepts either a prebuilt GalleryStore or a
        (records, matrix) pair."""
        if isinstance(records, GalleryStore):
            self.store_ = records
        else:
            self.store_ = build_store(records, matrix)
        return self

    def predict(self, queries, query_ids=None) -> list[CoarseResult]:
        if not hasattr(self, "store_"):
            raise ValidationError("CoarseRetriever.predict called before fit")
        return retrieve_batch(
            self.store_, queries, k=self.k, n_shards=self.n_shards, query_ids=query_ids
        )
