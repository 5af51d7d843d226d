"""Immutable in-memory gallery: records, embedding matrix, id index.

The matrix is held as one contiguous row-major float64 block with
per-row norms precomputed at build time, so a retrieval scan is a single
matrix-vector product plus a division. Stores are read-only after
construction and safe to share across concurrent scanners.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .types import ImageRecord
from .validation import check_embedding_matrix, validate_gallery


class GalleryStore:
    """Indexed gallery built by :func:`build_store`; do not mutate."""

    def __init__(self, records: Sequence[ImageRecord], matrix: np.ndarray):
        self.records: tuple[ImageRecord, ...] = tuple(records)
        self.matrix = matrix
        self.matrix.setflags(write=False)
        # insertion order of the manifest, deterministic across builds
        self.id_index: dict[str, int] = {rec.image_id: rec.row_index for rec in self.records}
        self.records_by_row: tuple[ImageRecord, ...] = tuple(
            sorted(self.records, key=lambda r: r.row_index)
        )
        self.image_ids: tuple[str, ...] = tuple(rec.image_id for rec in self.records_by_row)
        self.norms = np.sqrt(np.einsum("ij,ij->i", matrix, matrix))
        self.norms.setflags(write=False)

    @property
    def count(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return self.count

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.id_index

    def row_for(self, image_id: str) -> Optional[int]:
        """Row index for an id, or None if absent (no exception)."""
        return self.id_index.get(image_id)

    def record_for(self, image_id: str) -> Optional[ImageRecord]:
        row = self.id_index.get(image_id)
        return None if row is None else self.records_by_row[row]


@dataclass(frozen=True)
class ShardView:
    """Half-open row range [lo, hi) over a store; a shard set produced by
    :func:`shard` partitions [0, count) with no overlap."""

    store: GalleryStore
    lo: int
    hi: int

    @property
    def size(self) -> int:
        return self.hi - self.lo


def build_store(records: Sequence[ImageRecord], matrix) -> GalleryStore:
    """Validate and assemble a store. Raises ValidationError listing every
    violation if the manifest and matrix disagree."""
    arr = check_embedding_matrix(matrix, name="gallery matrix", dtype=np.float64)
    report = validate_gallery(records, matrix_rows=arr.shape[0], matrix_dim=arr.shape[1])
    report.raise_if_invalid()
    return GalleryStore(records, arr)


def shard(store: GalleryStore, n_shards: int) -> list[ShardView]:
    """Split rows into n_shards contiguous ranges with sizes differing by
    at most one; together they cover every row exactly once."""
    if n_shards < 1:
        raise ValueError(f"n_shards must be >= 1, got {n_shards}")
    count = store.count
    base, extra = divmod(count, n_shards)
    views = []
    lo = 0
    for i in range(n_shards):
        size = base + (1 if i < extra else 0)
        views.append(ShardView(store=store, lo=lo, hi=lo + size))
        lo += size
    return views
