"""Input validation helpers, in the spirit of sklearn's check_array.

``check_embedding_vector`` / ``check_embedding_matrix`` raise on the first
violation; ``validate_gallery`` is total: it never aborts on malformed
input and instead accumulates every violation into a report.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import ValidationError
from .types import PLATFORMS, ImageRecord


def check_embedding_vector(values, name: str = "vector") -> np.ndarray:
    """Validate one embedding: 1-D, dim >= 1, finite entries, nonzero norm.

    Returns the vector as a float64 array.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError(f"{name}: expected 1-D vector, got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise ValidationError(f"{name}: dim must be >= 1")
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr))[0])
        raise ValidationError(f"{name}: non-finite entry at index {bad}")
    if float(np.linalg.norm(arr)) == 0.0:
        raise ValidationError(f"{name}: zero-norm vector")
    return arr


def check_embedding_matrix(matrix, name: str = "matrix", dtype=np.float64) -> np.ndarray:
    """Validate a row-major embedding matrix: rectangular, non-empty,
    every row finite with nonzero norm. Violations name the row/column."""
    try:
        arr = np.asarray(matrix, dtype=dtype)
    except ValueError as exc:
        raise ValidationError(f"{name}: not a rectangular matrix ({exc})") from exc
    if arr.ndim != 2:
        raise ValidationError(f"{name}: expected 2-D matrix, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"{name}: empty matrix of shape {arr.shape}")
    finite = np.isfinite(arr)
    if not finite.all():
        r, c = np.argwhere(~finite)[0]
        raise ValidationError(f"{name}: non-finite entry at row {int(r)}, column {int(c)}")
    norms = np.sqrt(np.einsum("ij,ij->i", arr.astype(np.float64), arr.astype(np.float64)))
    if np.any(norms == 0.0):
        r = int(np.flatnonzero(norms == 0.0)[0])
        raise ValidationError(f"{name}: zero-norm row {r}")
    return np.ascontiguousarray(arr)


@dataclass
class GalleryValidationReport:
    """Outcome of validating a gallery manifest against its matrix."""

    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def raise_if_invalid(self) -> None:
        if self.violations:
            raise ValidationError(
                "gallery validation failed:\n  " + "\n  ".join(self.violations)
            )


def validate_gallery(
    records: Sequence[ImageRecord], matrix_rows: int, matrix_dim: int
) -> GalleryValidationReport:
    """Check every gallery invariant, reporting all violations with the
    index of the offending record. Never raises on bad input."""
    report = GalleryValidationReport()
    if matrix_dim < 1:
        report.violations.append(f"embedding dim {matrix_dim} must be >= 1")
    if len(records) != matrix_rows:
        report.violations.append(
            f"manifest has {len(records)} records but matrix has {matrix_rows} rows"
        )

    by_id: dict[str, list[int]] = {}
    rows_seen: dict[int, list[int]] = {}
    for i, rec in enumerate(records):
        if not rec.image_id:
            report.violations.append(f"record {i}: empty image_id")
        by_id.setdefault(rec.image_id, []).append(i)
        if rec.platform not in PLATFORMS:
            report.violations.append(
                f"record {i} ({rec.image_id!r}): unknown platform {rec.platform!r}"
            )
        if not isinstance(rec.row_index, int) or rec.row_index < 0 or rec.row_index >= matrix_rows:
            report.violations.append(
                f"record {i} ({rec.image_id!r}): row_index {rec.row_index} "
                f"out of range [0, {matrix_rows})"
            )
        else:
            rows_seen.setdefault(rec.row_index, []).append(i)

    for image_id, indices in by_id.items():
        if len(indices) > 1:
            report.violations.append(
                f"duplicate image_id {image_id!r} at record indices {indices}"
            )
    for row, indices in rows_seen.items():
        if len(indices) > 1:
            report.violations.append(f"row_index {row} reused at record indices {indices}")
    return report
