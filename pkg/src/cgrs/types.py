"""Domain records shared by every stage of the pipeline.

Vectors and matrices are plain numpy arrays validated through the helpers
in :mod:`cgrs.validation`; the dataclasses here carry the non-numeric
joins (ids, texts, boxes, rankings). ``image_id`` is the join key across
coarse results, captions and evaluation; ``row_index`` only addresses the
embedding matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .exceptions import ValidationError

PLATFORMS = ("drone", "satellite", "ground")


@dataclass(frozen=True)
class ImageRecord:
    """One gallery entry. Field validity is checked by
    :func:`cgrs.validation.validate_gallery`, which reports instead of
    raising so that malformed manifests can be diagnosed in one pass."""

    image_id: str
    platform: str
    uri: Optional[str]
    row_index: int


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    text: str
    relevant_ids: frozenset[str]
    row_index: int

    def __post_init__(self):
        if not self.query_id:
            raise ValidationError("query_id must be non-empty")
        if not self.text:
            raise ValidationError(f"query {self.query_id!r}: text must be non-empty")
        object.__setattr__(self, "relevant_ids", frozenset(self.relevant_ids))


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box as normalized (cx, cy, w, h).

    Extents may exceed [0,1]; area computations clip explicitly via
    :meth:`clipped_extent` and never mutate the stored fields.
    """

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.cx, self.cy, self.w, self.h)):
            raise ValidationError("box coordinates must be finite")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValidationError(f"box center ({self.cx}, {self.cy}) outside [0,1]")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValidationError(f"box size ({self.w}, {self.h}) outside (0,1]")

    def extent(self) -> tuple[float, float, float, float]:
        """Unclipped (x1, y1, x2, y2)."""
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    def clipped_extent(self) -> tuple[float, float, float, float]:
        """(x1, y1, x2, y2) clipped to the unit square."""
        x1, y1, x2, y2 = self.extent()

        def clip(v):
            return min(max(v, 0.0), 1.0)

        return clip(x1), clip(y1), clip(x2), clip(y2)


@dataclass(frozen=True)
class Caption:
    image_id: str
    text: str
    provider_id: str
    prompt_hash: str
    model_id: str
    token_limit: int

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValidationError(f"caption for {self.image_id!r}: text must be non-empty")
        if self.token_limit < 1:
            raise ValidationError("token_limit must be >= 1")

    def cache_key(self) -> tuple[str, str, str]:
        return (self.image_id, self.prompt_hash, self.model_id)


@dataclass(frozen=True)
class RankedCandidate:
    image_id: str
    score: float
    rank: int

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValidationError(f"candidate {self.image_id!r}: score must be finite")
        if self.rank < 1:
            raise ValidationError(f"candidate {self.image_id!r}: rank must be 1-based")


@dataclass(frozen=True)
class FusedCandidate:
    """Reranked candidate carrying the full score breakdown."""

    image_id: str
    s_coarse: float
    s_sem: float
    s_final: float
    rank: int

    @property
    def score(self) -> float:
        return self.s_final


def check_ranked_list(candidates: Sequence, context: str = "ranking") -> None:
    """Enforce the ranked-list invariants: non-increasing scores, ranks
    1..n without gaps, distinct image ids."""
    seen = set()
    prev = math.inf
    for i, cand in enumerate(candidates):
        if cand.rank != i + 1:
            raise ValidationError(f"{context}: rank {cand.rank} at position {i}, expected {i + 1}")
        if cand.score > prev:
            raise ValidationError(
                f"{context}: score {cand.score} at rank {cand.rank} exceeds previous {prev}"
            )
        if cand.image_id in seen:
            raise ValidationError(f"{context}: duplicate image_id {cand.image_id!r}")
        seen.add(cand.image_id)
        prev = cand.score


@dataclass(frozen=True)
class CoarseResult:
    """Stage-one output: the top-k candidates for one query, scores are
    raw cosines in [-1, 1]."""

    query_id: str
    candidates: tuple[RankedCandidate, ...]

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        check_ranked_list(self.candidates, context=f"coarse result {self.query_id!r}")
        for cand in self.candidates:
            if not -1.0 - 1e-6 <= cand.score <= 1.0 + 1e-6:
                raise ValidationError(
                    f"coarse result {self.query_id!r}: score {cand.score} outside cosine range"
                )

    def image_ids(self) -> list[str]:
        return [c.image_id for c in self.candidates]


@dataclass(frozen=True)
class FusedResult:
    """Stage-two output: the coarse candidate set reordered by fused score.

    Invariants: candidate ids equal the coarse input ids exactly, and
    every entry satisfies s_final == alpha*s_coarse + (1-alpha)*s_sem.
    """

    query_id: str
    candidates: tuple[FusedCandidate, ...]
    alpha: float
    missing_caption_policy: str = "error"

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        check_ranked_list(self.candidates, context=f"fused result {self.query_id!r}")
        for cand in self.candidates:
            expect = self.alpha * cand.s_coarse + (1.0 - self.alpha) * cand.s_sem
            if abs(cand.s_final - expect) > 1e-9:
                raise ValidationError(
                    f"fused result {self.query_id!r}: s_final {cand.s_final} "
                    f"inconsistent with fusion of ({cand.s_coarse}, {cand.s_sem})"
                )

    def image_ids(self) -> list[str]:
        return [c.image_id for c in self.candidates]


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 0.3
    k_coarse: int = 20
    k_report: tuple[int, ...] = (1, 5, 10)

    def __post_init__(self):
        object.__setattr__(self, "k_report", tuple(self.k_report))
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha {self.alpha} outside [0,1]")
        if not self.k_report or any(k < 1 for k in self.k_report):
            raise ValidationError("k_report must be positive integers")
        if self.k_coarse < max(self.k_report):
            raise ValidationError(
                f"k_coarse {self.k_coarse} smaller than max report k {max(self.k_report)}"
            )
