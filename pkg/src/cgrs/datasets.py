"""Synthetic benchmark generator with plantable ground truth.

Each query targets one distinct gallery image: its embedding is the
target's plus Gaussian noise (renormalized), its text contains the
target's unique identity token, and the target's mock caption contains
that token with a configurable fidelity. That construction lets the
whole pipeline be verified at desk scale: the noise level controls how
often the coarse stage misses, and caption fidelity controls how often
the reranker can recover.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .captions import DEFAULT_PROMPT, prompt_hash
from .exceptions import ValidationError
from .io import (
    write_caption_file,
    write_embedding_file,
    write_gallery_manifest,
    write_qrels,
    write_query_manifest,
)
from .types import Caption, ImageRecord, QueryRecord

# caption filler words, disjoint from the query glue words below
FILLER_VOCAB = (
    "building", "rooftop", "courtyard", "parkinglot", "roadway", "treeline",
    "stadium", "plaza", "fountain", "pathway", "lawn", "garage",
    "tower", "bridge", "canal", "field", "terrace", "awning",
    "fence", "garden", "annex", "atrium", "silo", "pavilion",
)
QUERY_GLUE = ("aerial", "views", "near")
CAPTION_FILLER_COUNT = 5
SYNTH_MODEL_ID = "synthetic-vlm"

# gallery embeddings come in clusters of near-duplicate scenes, mirroring
# galleries full of visually similar sites; noise then mostly confuses a
# query within its target's cluster rather than across the whole gallery
CLUSTER_SIZE = 8
CLUSTER_SPREAD = 0.3


@dataclass(frozen=True)
class SynthSpec:
    n_gallery: int
    n_queries: int
    dim: int
    coarse_noise_sigma: float = 0.0
    caption_fidelity: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_queries < 1 or self.n_gallery < self.n_queries:
            raise ValidationError(
                f"need n_gallery >= n_queries >= 1, got {self.n_gallery}, {self.n_queries}"
            )
        if self.dim < 1:
            raise ValidationError(f"dim must be >= 1, got {self.dim}")
        if self.coarse_noise_sigma < 0:
            raise ValidationError("coarse_noise_sigma must be >= 0")
        if not 0.0 <= self.caption_fidelity <= 1.0:
            raise ValidationError("caption_fidelity must lie in [0,1]")


@dataclass
class SynthData:
    gallery_records: list[ImageRecord]
    gallery_matrix: np.ndarray
    query_records: list[QueryRecord]
    query_matrix: np.ndarray
    qrels: dict[str, frozenset]
    captions: list[Caption]

    def caption_map(self) -> dict[str, Caption]:
        return {c.image_id: c for c in self.captions}

    def query_texts(self) -> dict[str, str]:
        return {q.query_id: q.text for q in self.query_records}


def identity_token(index: int) -> str:
    return f"site{index:05d}"


def generate_synthetic(spec: SynthSpec, out_dir: Optional[str] = None) -> SynthData:
    """Build the synthetic gallery/query/qrels/caption quadruple; writes
    the standard artifact files when out_dir is given. Deterministic:
    identical spec and seed produce byte-identical outputs."""
    rng = np.random.default_rng(spec.seed)

    n_clusters = (spec.n_gallery + CLUSTER_SIZE - 1) // CLUSTER_SIZE
    centers = rng.standard_normal((n_clusters, spec.dim))
    jitter = CLUSTER_SPREAD * rng.standard_normal((spec.n_gallery, spec.dim))
    cluster_of = np.arange(spec.n_gallery) // CLUSTER_SIZE
    gallery_matrix = (centers[cluster_of] + jitter).astype(np.float32)
    gallery_records = [
        ImageRecord(image_id=f"img_{i:05d}", platform="drone", uri=None, row_index=i)
        for i in range(spec.n_gallery)
    ]

    targets = rng.permutation(spec.n_gallery)[: spec.n_queries]
    query_rows = np.empty((spec.n_queries, spec.dim), dtype=np.float64)
    query_records = []
    qrels: dict[str, frozenset] = {}
    for qi, gi in enumerate(targets):
        base = gallery_matrix[gi].astype(np.float64)
        noisy = base + spec.coarse_noise_sigma * rng.standard_normal(spec.dim)
        norm = np.linalg.norm(noisy)
        if norm == 0.0:
            noisy = base
            norm = np.linalg.norm(noisy)
        query_rows[qi] = noisy / norm
        query_id = f"qry_{qi:05d}"
        target_id = gallery_records[gi].image_id
        text = " ".join([QUERY_GLUE[0], QUERY_GLUE[1], identity_token(int(gi)), QUERY_GLUE[2]])
        query_records.append(
            QueryRecord(
                query_id=query_id,
                text=text,
                relevant_ids=frozenset({target_id}),
                row_index=qi,
            )
        )
        qrels[query_id] = frozenset({target_id})
    query_matrix = query_rows.astype(np.float32)

    template_hash = prompt_hash(DEFAULT_PROMPT)
    captions = []
    for i, rec in enumerate(gallery_records):
        fillers = rng.choice(len(FILLER_VOCAB), size=CAPTION_FILLER_COUNT, replace=True)
        words = [FILLER_VOCAB[j] for j in fillers]
        if rng.random() < spec.caption_fidelity:
            words.insert(0, identity_token(i))
        captions.append(
            Caption(
                image_id=rec.image_id,
                text=" ".join(words),
                provider_id="mock",
                prompt_hash=template_hash,
                model_id=SYNTH_MODEL_ID,
                token_limit=256,
            )
        )

    data = SynthData(
        gallery_records=gallery_records,
        gallery_matrix=gallery_matrix,
        query_records=query_records,
        query_matrix=query_matrix,
        qrels=qrels,
        captions=captions,
    )
    if out_dir is not None:
        write_synth_dir(data, out_dir)
    return data


def write_synth_dir(data: SynthData, out_dir) -> dict[str, Path]:
    """Write the generated benchmark as the standard artifact files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "gallery_manifest": out / "gallery.jsonl",
        "gallery_embeddings": out / "gallery_embeddings.cgem",
        "query_manifest": out / "queries.jsonl",
        "query_embeddings": out / "query_embeddings.cgem",
        "qrels": out / "qrels.jsonl",
        "captions": out / "captions.jsonl",
    }
    write_gallery_manifest(paths["gallery_manifest"], data.gallery_records)
    write_embedding_file(paths["gallery_embeddings"], data.gallery_matrix)
    write_query_manifest(paths["query_manifest"], data.query_records)
    write_embedding_file(paths["query_embeddings"], data.query_matrix)
    write_qrels(paths["qrels"], data.qrels)
    write_caption_file(paths["captions"], data.captions)
    return paths
