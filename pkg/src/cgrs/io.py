"""On-disk formats: the binary embedding file and the JSONL sidecars.

Embeddings live in a raw little-endian float32 container because JSON
floats lose bit-exactness; everything else is JSON-lines with a fixed
key order so that write -> read -> write round-trips byte-identically.

Embedding file layout:
    bytes 0-3   magic "CGEM"
    bytes 4-7   format version (u32 LE, currently 1)
    bytes 8-11  dim   (u32 LE)
    bytes 12-15 count (u32 LE)
    then count * dim float32 LE values, row-major.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import FormatError, ValidationError
from .types import Caption, FusedResult, ImageRecord, QueryRecord, RankedCandidate

MAGIC = b"CGEM"
FORMAT_VERSION = 1
HEADER_SIZE = 16


def write_embedding_file(path, matrix) -> int:
    """Write a float32 embedding matrix; returns the byte count written
    (16-byte header + 4 * dim * count payload)."""
    try:
        arr = np.asarray(matrix, dtype=np.float32)
    except ValueError as exc:
        raise ValidationError(f"embedding matrix is not rectangular ({exc})") from exc
    if arr.ndim != 2:
        raise ValidationError(f"embedding matrix must be 2-D, got shape {arr.shape}")
    count, dim = arr.shape
    if count < 1 or dim < 1:
        raise ValidationError(f"embedding matrix must be non-empty, got shape {arr.shape}")
    finite = np.isfinite(arr)
    if not finite.all():
        r, c = np.argwhere(~finite)[0]
        raise ValidationError(f"non-finite embedding at row {int(r)}, column {int(c)}")
    norms = np.sqrt(np.einsum("ij,ij->i", arr.astype(np.float64), arr.astype(np.float64)))
    if np.any(norms == 0.0):
        raise ValidationError(f"zero-norm embedding row {int(np.flatnonzero(norms == 0.0)[0])}")

    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    header = MAGIC + struct.pack("<III", FORMAT_VERSION, dim, count)
    data = header + payload
    Path(path).write_bytes(data)
    return len(data)


def read_embedding_file(path) -> tuple[int, int, np.ndarray]:
    """Read an embedding file, returning (dim, count, float32 matrix).

    Every row is checked against the embedding invariants (finite,
    nonzero norm); violations report the row index.
    """
    data = Path(path).read_bytes()
    if len(data) < HEADER_SIZE or data[:4] != MAGIC:
        raise FormatError(f"bad magic, expected {MAGIC!r}", path=path)
    version, dim, count = struct.unpack("<III", data[4:HEADER_SIZE])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", path=path)
    if dim < 1 or count < 1:
        raise FormatError(f"degenerate header: dim={dim}, count={count}", path=path)
    expected = HEADER_SIZE + 4 * dim * count
    if len(data) != expected:
        raise FormatError(
            f"payload length mismatch: {len(data)} bytes, expected {expected}", path=path
        )
    matrix = np.frombuffer(data, dtype="<f4", offset=HEADER_SIZE).reshape(count, dim).copy()
    finite = np.isfinite(matrix)
    if not finite.all():
        r = int(np.argwhere(~finite)[0][0])
        raise FormatError(f"non-finite embedding in row {r}", path=path)
    norms = np.sqrt(np.einsum("ij,ij->i", matrix.astype(np.float64), matrix.astype(np.float64)))
    if np.any(norms == 0.0):
        r = int(np.flatnonzero(norms == 0.0)[0])
        raise FormatError(f"zero-norm embedding in row {r}", path=path)
    return dim, count, matrix


def dump_jsonl_line(obj) -> str:
    return json.dumps(obj, ensure_ascii=True, separators=(",", ":"))


def iter_jsonl(path) -> Iterable[tuple[int, dict]]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"invalid JSON ({exc.msg})", path=path, line=lineno) from exc
            if not isinstance(obj, dict):
                raise FormatError("expected a JSON object", path=path, line=lineno)
            yield lineno, obj


def _require(obj: dict, key: str, types, path, lineno):
    if key not in obj:
        raise FormatError(f"missing field {key!r}", path=path, line=lineno)
    value = obj[key]
    if not isinstance(value, types):
        raise FormatError(
            f"field {key!r} has type {type(value).__name__}", path=path, line=lineno
        )
    return value


def write_gallery_manifest(path, records: Sequence[ImageRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                dump_jsonl_line(
                    {
                        "image_id": rec.image_id,
                        "platform": rec.platform,
                        "uri": rec.uri,
                        "row_index": rec.row_index,
                    }
                )
                + "\n"
            )


def read_gallery_manifest(path) -> list[ImageRecord]:
    """Parse gallery records in file order (row_index i in the manifest
    maps to row i of the matrix; the order itself is preserved here)."""
    records = []
    for lineno, obj in iter_jsonl(path):
        uri = obj.get("uri")
        if uri is not None and not isinstance(uri, str):
            raise FormatError("field 'uri' must be string or null", path=path, line=lineno)
        records.append(
            ImageRecord(
                image_id=_require(obj, "image_id", str, path, lineno),
                platform=_require(obj, "platform", str, path, lineno),
                uri=uri,
                row_index=_require(obj, "row_index", int, path, lineno),
            )
        )
    return records


def write_query_manifest(path, records: Sequence[QueryRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                dump_jsonl_line(
                    {
                        "query_id": rec.query_id,
                        "text": rec.text,
                        "relevant_ids": sorted(rec.relevant_ids),
                        "row_index": rec.row_index,
                    }
                )
                + "\n"
            )


def read_query_manifest(path) -> list[QueryRecord]:
    records = []
    for lineno, obj in iter_jsonl(path):
        relevant = _require(obj, "relevant_ids", list, path, lineno)
        if not relevant or not all(isinstance(r, str) for r in relevant):
            raise FormatError(
                "field 'relevant_ids' must be a non-empty list of strings",
                path=path,
                line=lineno,
            )
        records.append(
            QueryRecord(
                query_id=_require(obj, "query_id", str, path, lineno),
                text=_require(obj, "text", str, path, lineno),
                relevant_ids=frozenset(relevant),
                row_index=_require(obj, "row_index", int, path, lineno),
            )
        )
    return records


def caption_to_dict(cap: Caption) -> dict:
    return {
        "image_id": cap.image_id,
        "text": cap.text,
        "provider_id": cap.provider_id,
        "prompt_hash": cap.prompt_hash,
        "model_id": cap.model_id,
        "token_limit": cap.token_limit,
    }


def write_caption_file(path, captions: Iterable[Caption]) -> None:
    """Write captions sorted by image_id so reruns are byte-identical."""
    ordered = sorted(captions, key=lambda c: c.image_id)
    with open(path, "w", encoding="utf-8") as fh:
        for cap in ordered:
            fh.write(dump_jsonl_line(caption_to_dict(cap)) + "\n")


def read_caption_file(path) -> list[Caption]:
    captions = []
    for lineno, obj in iter_jsonl(path):
        captions.append(
            Caption(
                image_id=_require(obj, "image_id", str, path, lineno),
                text=_require(obj, "text", str, path, lineno),
                provider_id=_require(obj, "provider_id", str, path, lineno),
                prompt_hash=_require(obj, "prompt_hash", str, path, lineno),
                model_id=_require(obj, "model_id", str, path, lineno),
                token_limit=_require(obj, "token_limit", int, path, lineno),
            )
        )
    return captions


def write_result_file(path, results: Iterable) -> None:
    """Write rankings (CoarseResult or FusedResult) as result JSONL."""
    with open(path, "w", encoding="utf-8") as fh:
        for res in results:
            ranking = [
                {"image_id": c.image_id, "score": float(c.score)} for c in res.candidates
            ]
            fh.write(dump_jsonl_line({"query_id": res.query_id, "ranking": ranking}) + "\n")


def read_result_file(path) -> list[tuple[str, list[RankedCandidate]]]:
    """Read a result file back as (query_id, candidates) pairs, enforcing
    descending score order and distinct ids."""
    out = []
    for lineno, obj in iter_jsonl(path):
        query_id = _require(obj, "query_id", str, path, lineno)
        ranking = _require(obj, "ranking", list, path, lineno)
        candidates = []
        prev = float("inf")
        seen = set()
        for i, entry in enumerate(ranking):
            if not isinstance(entry, dict):
                raise FormatError(f"ranking entry {i} is not an object", path=path, line=lineno)
            image_id = _require(entry, "image_id", str, path, lineno)
            score = _require(entry, "score", (int, float), path, lineno)
            score = float(score)
            if score > prev:
                raise FormatError(
                    f"ranking for {query_id!r} not in descending score order at entry {i}",
                    path=path,
                    line=lineno,
                )
            if image_id in seen:
                raise FormatError(
                    f"duplicate image_id {image_id!r} in ranking for {query_id!r}",
                    path=path,
                    line=lineno,
                )
            seen.add(image_id)
            prev = score
            candidates.append(RankedCandidate(image_id=image_id, score=score, rank=i + 1))
        out.append((query_id, candidates))
    return out


def write_qrels(path, qrels: Mapping[str, frozenset[str] | set[str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for query_id in qrels:
            fh.write(
                dump_jsonl_line({"query_id": query_id, "relevant_ids": sorted(qrels[query_id])})
                + "\n"
            )


def read_qrels(path) -> dict[str, frozenset[str]]:
    qrels: dict[str, frozenset[str]] = {}
    for lineno, obj in iter_jsonl(path):
        query_id = _require(obj, "query_id", str, path, lineno)
        relevant = _require(obj, "relevant_ids", list, path, lineno)
        if not relevant or not all(isinstance(r, str) for r in relevant):
            raise FormatError(
                "field 'relevant_ids' must be a non-empty list of strings",
                path=path,
                line=lineno,
            )
        if query_id in qrels:
            raise FormatError(f"duplicate query_id {query_id!r}", path=path, line=lineno)
        qrels[query_id] = frozenset(relevant)
    return qrels


def write_score_breakdown(path, results: Iterable[FusedResult]) -> None:
    """Optional per-candidate score breakdown emitted next to reranked
    results."""
    with open(path, "w", encoding="utf-8") as fh:
        for res in results:
            for c in res.candidates:
                fh.write(
                    dump_jsonl_line(
                        {
                            "query_id": res.query_id,
                            "image_id": c.image_id,
                            "s_coarse": float(c.s_coarse),
                            "s_sem": float(c.s_sem),
                            "s_final": float(c.s_final),
                        }
                    )
                    + "\n"
                )
