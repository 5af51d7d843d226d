"""Stage two: caption-guided semantic reranking.

The query and each candidate's caption are embedded into a shared
space; their cosine is fused with the coarse score by a convex weight
alpha and the candidate set is re-sorted. Reranking permutes the
candidate set, never adds or drops, so recall at the coarse depth is
preserved exactly.
"""

from __future__ import annotations

from typing import Mapping, Optional, Sequence

from sklearn.base import BaseEstimator

from .embedders import HashingSentenceEmbedder, SentenceEmbedder
from .exceptions import ValidationError
from .retriever import cosine_similarity
from .types import Caption, CoarseResult, FusedCandidate, FusedResult

MISSING_CAPTION_POLICIES = ("error", "penalize")
# under the "penalize" policy an uncaptioned candidate scores the cosine floor
PENALIZED_SEMANTIC_SCORE = -1.0


def semantic_similarity(embedder: SentenceEmbedder, query_text: str, caption: Caption) -> float:
    """Cosine between the query embedding and the caption embedding."""
    return cosine_similarity(embedder.embed(query_text), embedder.embed(caption.text))


def fuse_scores(s_coarse: float, s_sem: float, alpha: float) -> float:
    """Convex combination alpha*s_coarse + (1-alpha)*s_sem."""
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha {alpha} outside [0,1]")
    return alpha * s_coarse + (1.0 - alpha) * s_sem


def rerank(
    coarse: CoarseResult,
    query_text: str,
    captions: Mapping[str, Caption],
    embedder: SentenceEmbedder,
    alpha: float = 0.3,
    missing_caption_policy: str = "error",
) -> FusedResult:
    """Re-sort the coarse candidate set by fused score, ties by ascending
    image_id. The query is embedded exactly once; with alpha = 1 the
    coarse ordering is reproduced exactly.

    A candidate without a caption is a hard error by default; the
    "penalize" policy instead assigns it the minimum semantic score and
    keeps going. The active policy is recorded on the result.
    """
    if missing_caption_policy not in MISSING_CAPTION_POLICIES:
        raise ValidationError(f"unknown missing-caption policy {missing_caption_policy!r}")
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha {alpha} outside [0,1]")

    query_vec = embedder.embed(query_text)
    # captions go through the batch surface so remote embedders see one
    # request per query instead of one per candidate
    texts: list[str] = []
    slots: list[Optional[int]] = []
    for cand in coarse.candidates:
        caption = captions.get(cand.image_id)
        if caption is None:
            if missing_caption_policy == "error":
                raise ValidationError(
                    f"query {coarse.query_id!r}: no caption for candidate "
                    f"{cand.image_id!r} (policy=error)"
                )
            slots.append(None)
        else:
            slots.append(len(texts))
            texts.append(caption.text)
    caption_vecs = embedder.embed_batch(texts)

    entries = []
    for cand, slot in zip(coarse.candidates, slots):
        if slot is None:
            s_sem = PENALIZED_SEMANTIC_SCORE
        else:
            s_sem = cosine_similarity(query_vec, caption_vecs[slot])
        s_final = fuse_scores(cand.score, s_sem, alpha)
        entries.append((cand.image_id, cand.score, s_sem, s_final))

    entries.sort(key=lambda e: (-e[3], e[0]))
    fused = tuple(
        FusedCandidate(image_id=iid, s_coarse=sc, s_sem=ss, s_final=sf, rank=i + 1)
        for i, (iid, sc, ss, sf) in enumerate(entries)
    )
    return FusedResult(
        query_id=coarse.query_id,
        candidates=fused,
        alpha=alpha,
        missing_caption_policy=missing_caption_policy,
    )


def rerank_batch(
    results: Sequence[CoarseResult],
    query_texts: Mapping[str, str],
    captions: Mapping[str, Caption],
    embedder: SentenceEmbedder,
    alpha: float = 0.3,
    missing_caption_policy: str = "error",
) -> list[FusedResult]:
    missing = [r.query_id for r in results if r.query_id not in query_texts]
    if missing:
        raise ValidationError(f"no query text for query ids: {missing[:5]}")
    return [
        rerank(
            res,
            query_texts[res.query_id],
            captions,
            embedder,
            alpha=alpha,
            missing_caption_policy=missing_caption_policy,
        )
        for res in results
    ]


class CaptionReranker(BaseEstimator):
    """Estimator wrapper around caption-guided fusion.

    ``fit`` takes the caption collection, ``transform`` reorders coarse
    results given the query texts.
    """

    def __init__(
        self,
        alpha: float = 0.3,
        embedder: Optional[SentenceEmbedder] = None,
        missing_caption_policy: str = "error",
    ):
        self.alpha = alpha
        self.embedder = embedder
        self.missing_caption_policy = missing_caption_policy

    def fit(self, captions):
        """Accepts a mapping image_id -> Caption or an iterable of
        Caption records."""
        if isinstance(captions, Mapping):
            self.captions_ = dict(captions)
        else:
            self.captions_ = {c.image_id: c for c in captions}
        return self

    def transform(
        self, results: Sequence[CoarseResult], query_texts: Mapping[str, str]
    ) -> list[FusedResult]:
        if not hasattr(self, "captions_"):
            raise ValidationError("CaptionReranker.transform called before fit")
        embedder = self.embedder if self.embedder is not None else HashingSentenceEmbedder()
        return rerank_batch(
            results,
            query_texts,
            self.captions_,
            embedder,
            alpha=self.alpha,
            missing_caption_policy=self.missing_caption_policy,
        )
