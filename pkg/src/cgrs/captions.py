"""Stage-two caption acquisition.

Providers share one wire-neutral contract so any VLM backend can sit
behind the HTTP provider; the mock provider is a pure function of the
image id and the file provider replays a prepared JSONL mapping. Fetches
across a candidate set are deduplicated, bounded in concurrency, and
cached on disk keyed by (image_id, prompt_hash, model_id).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import requests

logger = logging.getLogger(__name__)

from .exceptions import FormatError, ProviderError, ValidationError
from .io import caption_to_dict, dump_jsonl_line, iter_jsonl, read_caption_file
from .store import GalleryStore
from .types import Caption, CoarseResult, ImageRecord

CAPTION_TOKEN_ENV = "CGRS_CAPTION_TOKEN"

DEFAULT_PROMPT = (
    "Please describe this aerial/drone-view image in detail. Focus on: "
    "(1) the main building or structure in the center of the image and its "
    "architectural features; (2) the surrounding buildings and their relative "
    "positions (left, right, top, bottom); (3) significant landmarks such as "
    "parking lots, sports fields, roads, or vegetation; (4) the overall "
    "spatial layout and arrangement of objects. Please be specific and precise."
)


def prompt_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class PromptTemplate:
    text: str = DEFAULT_PROMPT
    hash: str = ""

    def __post_init__(self):
        if not self.text:
            raise ValidationError("prompt template must be non-empty")
        object.__setattr__(self, "hash", prompt_hash(self.text))


def render_prompt(template: PromptTemplate) -> str:
    """Return the template text unchanged; pure, so repeated renders are
    byte-identical."""
    return template.text


@dataclass(frozen=True)
class ProviderConfig:
    provider_id: str = "mock"
    endpoint: Optional[str] = None
    model_id: str = "mock-captioner"
    token_limit: int = 256
    max_concurrency: int = 4
    max_retries: int = 3
    backoff_base_ms: int = 100
    timeout_s: float = 30.0

    def __post_init__(self):
        if self.provider_id not in ("mock", "file", "http"):
            raise ValidationError(f"unknown provider_id {self.provider_id!r}")
        if self.token_limit < 1:
            raise ValidationError("token_limit must be >= 1")
        if self.max_concurrency < 1:
            raise ValidationError("max_concurrency must be >= 1")
        if self.max_retries < 0:
            raise ValidationError("max_retries must be >= 0")
        if self.backoff_base_ms < 1:
            raise ValidationError("backoff_base_ms must be >= 1")
        if self.provider_id == "http" and not self.endpoint:
            raise ValidationError("http provider requires an endpoint")


class CaptionProvider:
    """Base provider; subclasses implement _generate(image, prompt)."""

    def __init__(self, config: ProviderConfig):
        self.config = config

    def fetch(self, image: ImageRecord, template: PromptTemplate) -> Caption:
        text = self._generate(image, render_prompt(template))
        if not text or not text.strip():
            raise ProviderError(
                f"provider returned an empty caption for {image.image_id!r}",
                image_id=image.image_id,
            )
        return Caption(
            image_id=image.image_id,
            text=text,
            provider_id=self.config.provider_id,
            prompt_hash=template.hash,
            model_id=self.config.model_id,
            token_limit=self.config.token_limit,
        )

    def _generate(self, image: ImageRecord, prompt: str) -> str:
        raise NotImplementedError


class MockCaptionProvider(CaptionProvider):
    """Deterministic caption derived from the image id alone; identical
    across calls and across processes."""

    def _generate(self, image: ImageRecord, prompt: str) -> str:
        tag = hashlib.sha256(image.image_id.encode("utf-8")).hexdigest()[:8]
        return (
            f"aerial view of {image.image_id}: central structure {tag} with "
            f"surrounding buildings, parking lots, roads, and vegetation"
        )


class FileCaptionProvider(CaptionProvider):
    """Replays captions from a JSONL mapping {"image_id", "text"}."""

    def __init__(self, config: ProviderConfig, mapping_path):
        super().__init__(config)
        self.mapping_path = mapping_path
        self._mapping: dict[str, str] = {}
        for lineno, obj in iter_jsonl(mapping_path):
            image_id = obj.get("image_id")
            text = obj.get("text")
            if not isinstance(image_id, str) or not isinstance(text, str):
                raise FormatError(
                    "caption mapping line must have string 'image_id' and 'text'",
                    path=mapping_path,
                    line=lineno,
                )
            self._mapping[image_id] = text

    def _generate(self, image: ImageRecord, prompt: str) -> str:
        if image.image_id not in self._mapping:
            raise ProviderError(
                f"no caption mapping for {image.image_id!r} in {self.mapping_path}",
                image_id=image.image_id,
            )
        return self._mapping[image.image_id]


def _retry_sleep(attempt: int, backoff_base_ms: int, rng: random.Random) -> None:
    # exponential backoff with full jitter; affects timing only, never output
    cap_ms = backoff_base_ms * (2**attempt)
    time.sleep(rng.uniform(0.0, cap_ms) / 1000.0)


class HttpCaptionProvider(CaptionProvider):
    """POSTs {"image_id", "image_uri", "prompt", "model_id", "max_tokens"}
    and expects 200 with {"caption": str}. Retries 5xx and timeouts with
    exponential backoff and full jitter; other statuses fail immediately.
    A bearer token is read from CGRS_CAPTION_TOKEN when present.
    """

    def __init__(self, config: ProviderConfig, session: Optional[requests.Session] = None):
        super().__init__(config)
        self._session = session or requests.Session()
        self._rng = random.Random()

    def _headers(self) -> dict[str, str]:
        token = os.environ.get(CAPTION_TOKEN_ENV)
        return {"Authorization": f"Bearer {token}"} if token else {}

    def _generate(self, image: ImageRecord, prompt: str) -> str:
        body = {
            "image_id": image.image_id,
            "image_uri": image.uri,
            "prompt": prompt,
            "model_id": self.config.model_id,
            "max_tokens": self.config.token_limit,
        }
        last_error = "unknown"
        for attempt in range(self.config.max_retries + 1):
            try:
                resp = self._session.post(
                    self.config.endpoint,
                    json=body,
                    headers=self._headers(),
                    timeout=self.config.timeout_s,
                )
            except (requests.Timeout, requests.ConnectionError) as exc:
                last_error = f"transport error: {exc}"
            else:
                if resp.status_code == 200:
                    try:
                        caption = resp.json().get("caption")
                    except json.JSONDecodeError:
                        caption = None
                    if not isinstance(caption, str):
                        raise ProviderError(
                            f"malformed caption response for {image.image_id!r}",
                            image_id=image.image_id,
                        )
                    return caption
                if resp.status_code < 500:
                    raise ProviderError(
                        f"caption request for {image.image_id!r} rejected "
                        f"with status {resp.status_code}",
                        image_id=image.image_id,
                    )
                last_error = f"status {resp.status_code}"
            if attempt < self.config.max_retries:
                logger.warning(
                    "caption request for %r failed (%s); retry %d/%d",
                    image.image_id,
                    last_error,
                    attempt + 1,
                    self.config.max_retries,
                )
                _retry_sleep(attempt, self.config.backoff_base_ms, self._rng)
        raise ProviderError(
            f"caption provider unavailable for {image.image_id!r} after "
            f"{self.config.max_retries} retries ({last_error})",
            image_id=image.image_id,
        )


def make_caption_provider(
    config: ProviderConfig, mapping_path=None, session=None
) -> CaptionProvider:
    if config.provider_id == "mock":
        return MockCaptionProvider(config)
    if config.provider_id == "file":
        if mapping_path is None:
            raise ValidationError("file provider requires a caption mapping path")
        return FileCaptionProvider(config, mapping_path)
    return HttpCaptionProvider(config, session=session)


def fetch_caption(
    provider: CaptionProvider, image: ImageRecord, template: PromptTemplate
) -> Caption:
    """Fetch one caption through the provider, with provider metadata and
    the prompt hash populated."""
    return provider.fetch(image, template)


class CaptionCache:
    """Append-only JSONL cache keyed by (image_id, prompt_hash, model_id);
    on load the last entry for a key wins. Single-writer appends are
    serialized with a lock; lookups return the stored caption verbatim."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[tuple[str, str, str], Caption] = {}
        if self.path.exists():
            for cap in read_caption_file(self.path):
                self._entries[cap.cache_key()] = cap

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, image_id: str, prompt_hash: str, model_id: str) -> Optional[Caption]:
        return self._entries.get((image_id, prompt_hash, model_id))

    def put(self, caption: Caption) -> None:
        line = dump_jsonl_line(caption_to_dict(caption)) + "\n"
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line)
            self._entries[caption.cache_key()] = caption


@dataclass
class CaptionRun:
    """Coverage report for one captioning pass over a candidate set."""

    captions: dict[str, Caption] = field(default_factory=dict)
    fetched: int = 0
    cached: int = 0
    failures: dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures


def caption_candidates(
    provider: CaptionProvider,
    cache: Optional[CaptionCache],
    candidates: Sequence[CoarseResult],
    gallery: GalleryStore,
    template: PromptTemplate,
) -> CaptionRun:
    """Caption every distinct candidate image exactly once.

    Duplicates across queries are fetched once; cache hits skip the
    provider entirely; in-flight requests never exceed the provider's
    max_concurrency. Per-image failures are aggregated into the report
    while successful fetches are preserved in the cache.
    """
    distinct = sorted({c.image_id for result in candidates for c in result.candidates})
    missing_in_gallery = [i for i in distinct if i not in gallery]
    if missing_in_gallery:
        raise ValidationError(
            f"candidate ids not present in gallery: {missing_in_gallery[:5]}"
        )

    run = CaptionRun()
    to_fetch: list[ImageRecord] = []
    for image_id in distinct:
        hit = cache.get(image_id, template.hash, provider.config.model_id) if cache else None
        if hit is not None:
            run.captions[image_id] = hit
            run.cached += 1
        else:
            to_fetch.append(gallery.record_for(image_id))

    if to_fetch:
        with ThreadPoolExecutor(max_workers=provider.config.max_concurrency) as pool:
            futures = {pool.submit(provider.fetch, rec, template): rec for rec in to_fetch}
            for future in as_completed(futures):
                rec = futures[future]
                try:
                    caption = future.result()
                except ProviderError as exc:
                    run.failures[rec.image_id] = str(exc)
                else:
                    run.captions[rec.image_id] = caption
                    run.fetched += 1
                    if cache is not None:
                        cache.put(caption)
    return run
