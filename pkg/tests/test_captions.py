import hashlib
import subprocess
import sys
import threading
import time

import pytest

from cgrs.captions import (
    CaptionCache,
    DEFAULT_PROMPT,
    FileCaptionProvider,
    HttpCaptionProvider,
    MockCaptionProvider,
    PromptTemplate,
    ProviderConfig,
    caption_candidates,
    fetch_caption,
    make_caption_provider,
    render_prompt,
)
from cgrs.exceptions import FormatError, ProviderError, ValidationError
from cgrs.io import read_caption_file
from cgrs.types import CoarseResult, ImageRecord, RankedCandidate


class TestPromptTemplate:
    def test_default_text_is_the_aerial_prompt(self):
        template = PromptTemplate()
        assert template.text.startswith(
            "Please describe this aerial/drone-view image in detail."
        )
        for marker in ("(1)", "(2)", "(3)", "(4)"):
            assert marker in template.text

    def test_hash_is_sha256_of_text(self):
        template = PromptTemplate(text="X")
        assert template.hash == hashlib.sha256(b"X").hexdigest()

    def test_render_is_pure_identity(self):
        template = PromptTemplate(text="custom instruction")
        assert render_prompt(template) == "custom instruction"
        assert render_prompt(template) == render_prompt(template)

    def test_default_hash_matches_default_text(self):
        template = PromptTemplate()
        assert template.hash == hashlib.sha256(DEFAULT_PROMPT.encode()).hexdigest()


class TestProviderConfig:
    def test_defaults(self):
        cfg = ProviderConfig()
        assert cfg.token_limit == 256
        assert cfg.provider_id == "mock"

    def test_http_requires_endpoint(self):
        with pytest.raises(ValidationError):
            ProviderConfig(provider_id="http")

    def test_token_limit_floor(self):
        with pytest.raises(ValidationError):
            ProviderConfig(token_limit=0)

    def test_unknown_provider(self):
        with pytest.raises(ValidationError):
            ProviderConfig(provider_id="carrier-pigeon")


def _image(image_id, uri=None):
    return ImageRecord(image_id, "drone", uri, 0)


class TestMockProvider:
    def test_deterministic_per_image(self):
        provider = MockCaptionProvider(ProviderConfig())
        template = PromptTemplate()
        first = fetch_caption(provider, _image("img_3"), template)
        second = fetch_caption(provider, _image("img_3"), template)
        assert first.text == second.text
        assert first.provider_id == "mock"
        assert first.prompt_hash == template.hash
        other = fetch_caption(provider, _image("img_4"), template)
        assert other.text != first.text

    def test_deterministic_across_processes(self):
        code = (
            "from cgrs.captions import MockCaptionProvider, ProviderConfig, PromptTemplate\n"
            "from cgrs.types import ImageRecord\n"
            "p = MockCaptionProvider(ProviderConfig())\n"
            "img = ImageRecord('img_3', 'drone', None, 0)\n"
            "print(p.fetch(img, PromptTemplate()).text)"
        )
        out = subprocess.run(
            [sys.executable, "-c", code], capture_output=True, text=True, check=True
        ).stdout.strip()
        provider = MockCaptionProvider(ProviderConfig())
        assert out == provider.fetch(_image("img_3"), PromptTemplate()).text


class TestFileProvider:
    def test_returns_exact_text(self, tmp_path):
        mapping = tmp_path / "map.jsonl"
        mapping.write_text('{"image_id": "img_3", "text": "a tall red tower"}\n')
        provider = FileCaptionProvider(ProviderConfig(provider_id="file"), mapping)
        cap = provider.fetch(_image("img_3"), PromptTemplate())
        assert cap.text == "a tall red tower"

    def test_missing_id_is_provider_error(self, tmp_path):
        mapping = tmp_path / "map.jsonl"
        mapping.write_text('{"image_id": "img_3", "text": "x"}\n')
        provider = FileCaptionProvider(ProviderConfig(provider_id="file"), mapping)
        with pytest.raises(ProviderError, match="img_9"):
            provider.fetch(_image("img_9"), PromptTemplate())

    def test_empty_caption_is_provider_error(self, tmp_path):
        mapping = tmp_path / "map.jsonl"
        mapping.write_text('{"image_id": "img_3", "text": "   "}\n')
        provider = FileCaptionProvider(ProviderConfig(provider_id="file"), mapping)
        with pytest.raises(ProviderError, match="empty"):
            provider.fetch(_image("img_3"), PromptTemplate())

    def test_malformed_mapping_rejected(self, tmp_path):
        mapping = tmp_path / "map.jsonl"
        mapping.write_text('{"image_id": "img_3"}\n')
        with pytest.raises(FormatError):
            FileCaptionProvider(ProviderConfig(provider_id="file"), mapping)


def _http_config(url, **kw):
    defaults = dict(
        provider_id="http",
        endpoint=url,
        model_id="test-vlm",
        max_retries=3,
        backoff_base_ms=1,
        timeout_s=5.0,
    )
    defaults.update(kw)
    return ProviderConfig(**defaults)


class TestHttpProvider:
    def test_success_round_trip(self, scripted_server):
        server = scripted_server([{"status": 200, "body": {"caption": "seen from above"}}])
        provider = HttpCaptionProvider(_http_config(server.url))
        cap = provider.fetch(_image("img_1", uri="s3://bucket/img_1.jpg"), PromptTemplate())
        assert cap.text == "seen from above"
        body = server.requests[0]["body"]
        assert body["image_id"] == "img_1"
        assert body["image_uri"] == "s3://bucket/img_1.jpg"
        assert body["model_id"] == "test-vlm"
        assert body["max_tokens"] == 256
        assert body["prompt"].startswith("Please describe this aerial/drone-view image")

    def test_retries_5xx_then_succeeds(self, scripted_server, caplog):
        server = scripted_server(
            [
                {"status": 503, "body": {}},
                {"status": 503, "body": {}},
                {"status": 200, "body": {"caption": "third time lucky"}},
            ]
        )
        provider = HttpCaptionProvider(_http_config(server.url))
        with caplog.at_level("WARNING", logger="cgrs.captions"):
            cap = provider.fetch(_image("img_1"), PromptTemplate())
        assert cap.text == "third time lucky"
        assert len(server.requests) == 3  # one initial call plus exactly two retries
        retry_logs = [r for r in caplog.records if "retry" in r.getMessage()]
        assert len(retry_logs) == 2

    def test_exhausted_retries_raise(self, scripted_server):
        server = scripted_server([{"status": 503, "body": {}}] * 4)
        provider = HttpCaptionProvider(_http_config(server.url, max_retries=2))
        with pytest.raises(ProviderError, match="unavailable"):
            provider.fetch(_image("img_1"), PromptTemplate())
        assert len(server.requests) == 3

    def test_4xx_fails_immediately_without_retry(self, scripted_server):
        server = scripted_server([{"status": 404, "body": {}}])
        provider = HttpCaptionProvider(_http_config(server.url))
        with pytest.raises(ProviderError, match="404"):
            provider.fetch(_image("img_1"), PromptTemplate())
        assert len(server.requests) == 1

    def test_empty_caption_is_provider_error(self, scripted_server):
        server = scripted_server([{"status": 200, "body": {"caption": "  "}}])
        provider = HttpCaptionProvider(_http_config(server.url))
        with pytest.raises(ProviderError, match="empty"):
            provider.fetch(_image("img_1"), PromptTemplate())

    def test_timeout_is_retried(self, scripted_server):
        server = scripted_server(
            [
                {"status": 200, "body": {"caption": "slow"}, "delay": 0.6},
                {"status": 200, "body": {"caption": "fast"}},
            ]
        )
        provider = HttpCaptionProvider(_http_config(server.url, timeout_s=0.2))
        cap = provider.fetch(_image("img_1"), PromptTemplate())
        assert cap.text == "fast"
        assert len(server.requests) == 2

    def test_bearer_token_from_environment(self, scripted_server, monkeypatch):
        monkeypatch.setenv("CGRS_CAPTION_TOKEN", "sekrit")
        server = scripted_server([{"status": 200, "body": {"caption": "ok"}}])
        provider = HttpCaptionProvider(_http_config(server.url))
        provider.fetch(_image("img_1"), PromptTemplate())
        assert server.requests[0]["headers"]["Authorization"] == "Bearer sekrit"


class TestCaptionCache:
    def test_hit_returns_stored_caption_verbatim(self, tmp_path):
        cache = CaptionCache(tmp_path / "cache.jsonl")
        provider = MockCaptionProvider(ProviderConfig())
        cap = provider.fetch(_image("img_5"), PromptTemplate())
        cache.put(cap)
        reloaded = CaptionCache(tmp_path / "cache.jsonl")
        assert reloaded.get("img_5", cap.prompt_hash, cap.model_id) == cap

    def test_last_entry_wins_on_load(self, tmp_path):
        from cgrs.types import Caption

        path = tmp_path / "cache.jsonl"
        cache = CaptionCache(path)
        cache.put(Caption("img", "old text", "mock", "hh", "m", 256))
        cache.put(Caption("img", "new text", "mock", "hh", "m", 256))
        reloaded = CaptionCache(path)
        assert reloaded.get("img", "hh", "m").text == "new text"
        assert len(reloaded) == 1

    def test_key_includes_prompt_and_model(self, tmp_path):
        from cgrs.types import Caption

        cache = CaptionCache(tmp_path / "cache.jsonl")
        cache.put(Caption("img", "t1", "mock", "hash_a", "m1", 256))
        cache.put(Caption("img", "t2", "mock", "hash_b", "m1", 256))
        cache.put(Caption("img", "t3", "mock", "hash_a", "m2", 256))
        assert cache.get("img", "hash_a", "m1").text == "t1"
        assert cache.get("img", "hash_b", "m1").text == "t2"
        assert cache.get("img", "hash_a", "m2").text == "t3"
        assert len(cache) == 3


class CountingProvider(MockCaptionProvider):
    """Mock provider instrumented to count calls and watch concurrency."""

    def __init__(self, config, delay=0.0):
        super().__init__(config)
        self.calls = 0
        self.in_flight = 0
        self.max_in_flight = 0
        self.delay = delay
        self.fail_ids = set()
        self._lock = threading.Lock()

    def _generate(self, image, prompt):
        with self._lock:
            self.calls += 1
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
        try:
            if self.delay:
                time.sleep(self.delay)
            if image.image_id in self.fail_ids:
                raise ProviderError("scripted failure", image_id=image.image_id)
            return super()._generate(image, prompt)
        finally:
            with self._lock:
                self.in_flight -= 1


def _gallery(n):
    import numpy as np

    from cgrs.store import build_store

    records = [ImageRecord(f"img_{i:03d}", "drone", None, i) for i in range(n)]
    rng = np.random.default_rng(0)
    return build_store(records, rng.standard_normal((n, 4)))


def _coarse(query_id, ids):
    return CoarseResult(
        query_id,
        tuple(
            RankedCandidate(image_id, 1.0 - 0.01 * i, i + 1) for i, image_id in enumerate(ids)
        ),
    )


class TestCaptionCandidates:
    def test_shared_candidates_fetched_once(self, tmp_path):
        gallery = _gallery(30)
        ids_a = [f"img_{i:03d}" for i in range(20)]
        ids_b = [f"img_{i:03d}" for i in range(5, 25)]  # shares 15 of 20
        provider = CountingProvider(ProviderConfig(max_concurrency=4))
        cache = CaptionCache(tmp_path / "cache.jsonl")
        run = caption_candidates(
            provider, cache, [_coarse("q1", ids_a), _coarse("q2", ids_b)], gallery,
            PromptTemplate(),
        )
        assert provider.calls == 25
        assert run.fetched == 25
        assert run.cached == 0
        assert set(run.captions) == set(ids_a) | set(ids_b)

    def test_warm_cache_skips_provider_entirely(self, tmp_path):
        gallery = _gallery(10)
        ids = [f"img_{i:03d}" for i in range(10)]
        template = PromptTemplate()
        cache_path = tmp_path / "cache.jsonl"
        first_provider = CountingProvider(ProviderConfig())
        run1 = caption_candidates(
            first_provider, CaptionCache(cache_path), [_coarse("q", ids)], gallery, template
        )
        out1 = tmp_path / "captions1.jsonl"
        from cgrs.io import write_caption_file

        write_caption_file(out1, run1.captions.values())

        second_provider = CountingProvider(ProviderConfig())
        run2 = caption_candidates(
            second_provider, CaptionCache(cache_path), [_coarse("q", ids)], gallery, template
        )
        assert second_provider.calls == 0
        assert run2.cached == 10 and run2.fetched == 0
        out2 = tmp_path / "captions2.jsonl"
        write_caption_file(out2, run2.captions.values())
        assert out1.read_bytes() == out2.read_bytes()

    def test_concurrency_never_exceeds_bound(self, tmp_path):
        gallery = _gallery(24)
        ids = [f"img_{i:03d}" for i in range(24)]
        provider = CountingProvider(ProviderConfig(max_concurrency=3), delay=0.01)
        run = caption_candidates(
            provider, CaptionCache(tmp_path / "c.jsonl"), [_coarse("q", ids)], gallery,
            PromptTemplate(),
        )
        assert run.fetched == 24
        assert provider.max_in_flight <= 3
        assert provider.max_in_flight >= 2  # the pool actually ran in parallel

    def test_partial_failure_reported_and_rest_preserved(self, tmp_path):
        gallery = _gallery(25)
        ids = [f"img_{i:03d}" for i in range(25)]
        provider = CountingProvider(ProviderConfig())
        provider.fail_ids = {"img_007"}
        cache = CaptionCache(tmp_path / "c.jsonl")
        run = caption_candidates(provider, cache, [_coarse("q", ids)], gallery, PromptTemplate())
        assert not run.ok
        assert set(run.failures) == {"img_007"}
        assert len(run.captions) == 24
        # progress is preserved: the failed id is absent, the rest cached
        reloaded = CaptionCache(tmp_path / "c.jsonl")
        assert len(reloaded) == 24

    def test_unresolvable_candidate_rejected(self, tmp_path):
        gallery = _gallery(3)
        provider = CountingProvider(ProviderConfig())
        with pytest.raises(ValidationError, match="ghost"):
            caption_candidates(
                provider,
                CaptionCache(tmp_path / "c.jsonl"),
                [_coarse("q", ["ghost"])],
                gallery,
                PromptTemplate(),
            )

    def test_cache_file_is_append_only_jsonl(self, tmp_path):
        gallery = _gallery(5)
        ids = [f"img_{i:03d}" for i in range(5)]
        cache_path = tmp_path / "cache.jsonl"
        provider = CountingProvider(ProviderConfig())
        caption_candidates(
            provider, CaptionCache(cache_path), [_coarse("q", ids)], gallery, PromptTemplate()
        )
        entries = read_caption_file(cache_path)
        assert len(entries) == 5


def test_make_provider_factory(tmp_path):
    assert isinstance(make_caption_provider(ProviderConfig()), MockCaptionProvider)
    mapping = tmp_path / "m.jsonl"
    mapping.write_text('{"image_id": "a", "text": "t"}\n')
    assert isinstance(
        make_caption_provider(ProviderConfig(provider_id="file"), mapping_path=mapping),
        FileCaptionProvider,
    )
    with pytest.raises(ValidationError):
        make_caption_provider(ProviderConfig(provider_id="file"))
