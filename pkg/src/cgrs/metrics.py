"""Recall@K evaluation, run comparison, alpha sweeps, and the rerank
latency benchmark.

A query counts as a hit at depth k when any of its relevant images
appears in the top k; recall is reported as a percentage over all
queries. Reports carry per-query first-hit ranks so run comparisons can
count improved/degraded queries exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .embedders import HashingSentenceEmbedder, SentenceEmbedder
from .exceptions import ValidationError
from .reranker import fuse_scores, rerank_batch
from .types import Caption, CoarseResult

Qrels = Mapping[str, frozenset]
# rankings: query_id -> image ids in descending score order
Rankings = Mapping[str, Sequence[str]]


@dataclass
class LatencyStats:
    mean_ms: float
    p99_ms: float
    median_ms: float
    n_trials: int

    def to_json_dict(self) -> dict:
        return {"mean": self.mean_ms, "p99": self.p99_ms}


@dataclass
class MetricsReport:
    """Recall@K outcome for one run."""

    recall_at: dict[int, float]
    n_queries: int
    first_hit: dict[str, Optional[int]]
    truncated_ks: set[int] = field(default_factory=set)
    latency: Optional[LatencyStats] = None

    def to_json_dict(self) -> dict:
        return {
            "recall": {str(k): self.recall_at[k] for k in sorted(self.recall_at)},
            "n_queries": self.n_queries,
            "latency_ms": self.latency.to_json_dict() if self.latency else None,
        }

    def format_table(self, label: str = "run") -> str:
        ks = sorted(self.recall_at)
        header = " | ".join([f"{'Run':<12}"] + [f"Recall@{k:<3}" for k in ks])
        row = " | ".join([f"{label:<12}"] + [f"{self.recall_at[k]:8.2f} " for k in ks])
        lines = [header, "-" * len(header), row]
        if self.truncated_ks:
            trunc = ", ".join(str(k) for k in sorted(self.truncated_ks))
            lines.append(f"(k > ranking length, evaluated over available prefix: {trunc})")
        return "\n".join(lines)


def rankings_from_results(results: Sequence) -> dict[str, list[str]]:
    """Flatten CoarseResult/FusedResult objects or (query_id, candidates)
    pairs into the id-order mapping the metrics consume."""
    out: dict[str, list[str]] = {}
    for res in results:
        if isinstance(res, tuple):
            query_id, candidates = res
        else:
            query_id, candidates = res.query_id, res.candidates
        if query_id in out:
            raise ValidationError(f"duplicate query_id {query_id!r} in results")
        out[query_id] = [c.image_id for c in candidates]
    return out


def first_hit_rank(ranking: Sequence[str], relevant: frozenset) -> Optional[int]:
    for i, image_id in enumerate(ranking):
        if image_id in relevant:
            return i + 1
    return None


def recall_at_k(rankings: Rankings, qrels: Qrels, ks: Sequence[int]) -> MetricsReport:
    """Percentage of queries with a relevant image in the top k, for each
    k. A k beyond a ranking's length evaluates the available prefix and
    flags the report instead of erroring."""
    if not rankings:
        raise ValidationError("no rankings to evaluate")
    if any(k < 1 for k in ks):
        raise ValidationError("every k must be >= 1")
    missing = [q for q in rankings if q not in qrels]
    if missing:
        raise ValidationError(f"queries missing from qrels: {missing[:5]}")
    for query_id in rankings:
        if not qrels[query_id]:
            raise ValidationError(f"qrels for {query_id!r} must be non-empty")

    hits: dict[str, Optional[int]] = {}
    truncated: set[int] = set()
    for query_id, ranking in rankings.items():
        hits[query_id] = first_hit_rank(ranking, qrels[query_id])
        for k in ks:
            if k > len(ranking):
                truncated.add(k)
    n = len(rankings)
    recall = {
        int(k): 100.0 * sum(1 for r in hits.values() if r is not None and r <= k) / n
        for k in ks
    }
    return MetricsReport(recall_at=recall, n_queries=n, first_hit=hits, truncated_ks=truncated)


@dataclass
class CompareReport:
    """Reranked-vs-coarse delta at each k plus per-query movement counts."""

    deltas: dict[int, float]
    improved: int
    degraded: int
    unchanged: int
    baseline: MetricsReport
    candidate: MetricsReport

    def format_table(self) -> str:
        ks = sorted(self.deltas)
        lines = [
            " | ".join([f"{'Run':<12}"] + [f"Recall@{k:<3}" for k in ks]),
        ]
        lines.append("-" * len(lines[0]))
        for label, rep in (("coarse", self.baseline), ("reranked", self.candidate)):
            lines.append(
                " | ".join([f"{label:<12}"] + [f"{rep.recall_at[k]:8.2f} " for k in ks])
            )
        lines.append(
            " | ".join([f"{'delta':<12}"] + [f"{self.deltas[k]:+8.2f} " for k in ks])
        )
        lines.append(
            f"queries improved: {self.improved}, degraded: {self.degraded}, "
            f"unchanged: {self.unchanged}"
        )
        return "\n".join(lines)

    def to_json_dict(self) -> dict:
        return {
            "delta": {str(k): self.deltas[k] for k in sorted(self.deltas)},
            "improved": self.improved,
            "degraded": self.degraded,
            "unchanged": self.unchanged,
            "coarse": self.baseline.to_json_dict(),
            "reranked": self.candidate.to_json_dict(),
        }


def compare_runs(
    coarse: Rankings, reranked: Rankings, qrels: Qrels, ks: Sequence[int]
) -> CompareReport:
    """Per-k recall deltas (reranked - coarse) over the same query set,
    with per-query movement judged by first-hit rank."""
    if set(coarse) != set(reranked):
        only_a = sorted(set(coarse) - set(reranked))[:3]
        only_b = sorted(set(reranked) - set(coarse))[:3]
        raise ValidationError(
            f"query sets differ between runs (coarse-only {only_a}, reranked-only {only_b})"
        )
    base = recall_at_k(coarse, qrels, ks)
    cand = recall_at_k(reranked, qrels, ks)
    improved = degraded = unchanged = 0
    for query_id in coarse:
        before = base.first_hit[query_id]
        after = cand.first_hit[query_id]
        b = before if before is not None else float("inf")
        a = after if after is not None else float("inf")
        if a < b:
            improved += 1
        elif a > b:
            degraded += 1
        else:
            unchanged += 1
    deltas = {k: cand.recall_at[k] - base.recall_at[k] for k in base.recall_at}
    return CompareReport(
        deltas=deltas,
        improved=improved,
        degraded=degraded,
        unchanged=unchanged,
        baseline=base,
        candidate=cand,
    )


def alpha_sweep(
    coarse_results: Sequence[CoarseResult],
    query_texts: Mapping[str, str],
    captions: Mapping[str, Caption],
    qrels: Qrels,
    alphas: Sequence[float],
    ks: Sequence[int],
    embedder: Optional[SentenceEmbedder] = None,
) -> dict[float, MetricsReport]:
    """Evaluate one reranked run per alpha, reusing the coarse stage. The
    alpha = 1.0 row reproduces the coarse metrics exactly."""
    embedder = embedder if embedder is not None else HashingSentenceEmbedder()
    table: dict[float, MetricsReport] = {}
    for alpha in alphas:
        fused = rerank_batch(coarse_results, query_texts, captions, embedder, alpha=alpha)
        table[float(alpha)] = recall_at_k(rankings_from_results(fused), qrels, ks)
    return table


def measure_rerank_latency(
    n_candidates: int = 20,
    n_trials: int = 1000,
    embed_dim: int = 384,
    seed: int = 0,
) -> LatencyStats:
    """Wall-clock per-query rerank cost with the local hashing embedder:
    embed the query and its cached candidate captions, fuse, sort."""
    if n_candidates < 1 or n_trials < 1:
        raise ValidationError("n_candidates and n_trials must be >= 1")
    rng = np.random.default_rng(seed)
    embedder = HashingSentenceEmbedder(dim=embed_dim)
    vocab = [f"word{i}" for i in range(200)]
    captions = [
        " ".join(rng.choice(vocab, size=25).tolist()) for _ in range(n_candidates)
    ]
    coarse_scores = rng.uniform(-1.0, 1.0, size=n_candidates).tolist()
    ids = [f"img_{i:04d}" for i in range(n_candidates)]
    query_text = " ".join(rng.choice(vocab, size=12).tolist())

    samples = []
    for _ in range(n_trials):
        start = time.perf_counter()
        qv = embedder.embed(query_text)
        qn = float(np.linalg.norm(qv))
        fused = []
        for iid, s_coarse, text in zip(ids, coarse_scores, captions):
            cv = embedder.embed(text)
            s_sem = float(np.dot(qv, cv) / (qn * np.linalg.norm(cv)))
            fused.append((iid, fuse_scores(s_coarse, s_sem, 0.3)))
        fused.sort(key=lambda e: (-e[1], e[0]))
        samples.append((time.perf_counter() - start) * 1000.0)

    arr = np.asarray(samples)
    return LatencyStats(
        mean_ms=float(arr.mean()),
        p99_ms=float(np.percentile(arr, 99)),
        median_ms=float(np.median(arr)),
        n_trials=n_trials,
    )
