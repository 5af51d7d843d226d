"""Two-stage caption-guided text-to-image retrieval.

Stage one scans precomputed embeddings with exact cosine top-k; stage
two captions the candidates through a pluggable provider and reorders
them by a convex fusion of coarse and caption-text similarity.
"""

from .captions import (
    CaptionCache,
    DEFAULT_PROMPT,
    PromptTemplate,
    ProviderConfig,
    caption_candidates,
    fetch_caption,
    make_caption_provider,
    render_prompt,
)
from .config import EmbedderConfig, PipelineConfig, load_config
from .datasets import SynthSpec, generate_synthetic
from .embedders import (
    FileSentenceEmbedder,
    HashingSentenceEmbedder,
    HttpSentenceEmbedder,
    SentenceEmbedder,
    embed_text,
)
from .exceptions import (
    CgrsError,
    ConfigError,
    FormatError,
    ProviderError,
    ValidationError,
)
from .losses import (
    grounding_loss,
    iou,
    itc_loss,
    itm_loss,
    run_loss_checks,
    select_hard_negative,
    spatial_class,
    spatial_loss,
    total_loss,
)
from .metrics import (
    CompareReport,
    LatencyStats,
    MetricsReport,
    alpha_sweep,
    compare_runs,
    measure_rerank_latency,
    rankings_from_results,
    recall_at_k,
)
from .reranker import CaptionReranker, fuse_scores, rerank, rerank_batch, semantic_similarity
from .retriever import CoarseRetriever, cosine_similarity, retrieve_batch, retrieve_topk
from .store import GalleryStore, ShardView, build_store, shard
from .types import (
    BoundingBox,
    Caption,
    CoarseResult,
    FusedCandidate,
    FusedResult,
    FusionConfig,
    ImageRecord,
    QueryRecord,
    RankedCandidate,
)
from .validation import check_embedding_matrix, check_embedding_vector, validate_gallery

__version__ = "0.1.0"
