import subprocess
import sys

import numpy as np
import pytest

from cgrs.embedders import (
    FileSentenceEmbedder,
    HashingSentenceEmbedder,
    HttpSentenceEmbedder,
    embed_text,
    tokenize,
)
from cgrs.exceptions import ProviderError, ValidationError
from cgrs.io import write_embedding_file
from cgrs.retriever import cosine_similarity


class TestTokenize:
    def test_lowercase_and_split(self):
        assert tokenize("Red-Roof, building!") == ["red", "roof", "building"]

    def test_drops_empty_tokens(self):
        assert tokenize("  ... ") == []

    def test_keeps_digits(self):
        assert tokenize("site00042 block7") == ["site00042", "block7"]


class TestHashingEmbedder:
    def test_token_order_is_irrelevant(self):
        embedder = HashingSentenceEmbedder(dim=64)
        assert np.array_equal(embedder.embed("a b"), embedder.embed("b a"))

    def test_repeated_calls_identical(self):
        embedder = HashingSentenceEmbedder(dim=64)
        assert np.array_equal(
            embedder.embed("tall tower by the lake"),
            embedder.embed("tall tower by the lake"),
        )

    def test_unit_norm_and_dim(self):
        embedder = HashingSentenceEmbedder(dim=96)
        vec = embedder.embed("three word caption")
        assert vec.shape == (96,)
        assert np.linalg.norm(vec) == pytest.approx(1.0)

    def test_shared_tokens_raise_similarity(self):
        embedder = HashingSentenceEmbedder(dim=64)
        a = embedder.embed("red roof building")
        b = embedder.embed("red roof structure")
        c = embedder.embed("blue lake water")
        assert cosine_similarity(a, b) > cosine_similarity(a, c)

    def test_disjoint_token_sets_give_zero(self):
        # chosen so the hashed dimensions do not collide at this width
        embedder = HashingSentenceEmbedder(dim=512)
        a = embedder.embed("harbor crane gantry")
        b = embedder.embed("meadow stream willow")
        assert cosine_similarity(a, b) == 0.0

    def test_deterministic_across_processes(self):
        code = (
            "from cgrs.embedders import HashingSentenceEmbedder\n"
            "v = HashingSentenceEmbedder(dim=64).embed('central tower near road')\n"
            "print(','.join(repr(x) for x in v.tolist()))"
        )
        out = subprocess.run(
            [sys.executable, "-c", code], capture_output=True, text=True, check=True
        ).stdout.strip()
        local = HashingSentenceEmbedder(dim=64).embed("central tower near road")
        remote = np.array([float(x) for x in out.split(",")])
        assert np.array_equal(local, remote)

    def test_empty_text_rejected(self):
        embedder = HashingSentenceEmbedder(dim=64)
        with pytest.raises(ValidationError):
            embed_text(embedder, "")

    def test_tokenless_text_rejected(self):
        embedder = HashingSentenceEmbedder(dim=64)
        with pytest.raises(ValidationError):
            embedder.embed("!!! ---")

    def test_batch_stacks_rows(self):
        embedder = HashingSentenceEmbedder(dim=32)
        matrix = embedder.embed_batch(["one two", "three"])
        assert matrix.shape == (2, 32)
        assert np.array_equal(matrix[0], embedder.embed("one two"))


class TestFileEmbedder:
    def _fixture(self, tmp_path, texts):
        embedding_path = tmp_path / "emb.cgem"
        manifest_path = tmp_path / "emb_manifest.jsonl"
        rng = np.random.default_rng(0)
        matrix = rng.standard_normal((len(texts), 8)).astype(np.float32)
        write_embedding_file(embedding_path, matrix)
        lines = []
        for i, text in enumerate(texts):
            digest = FileSentenceEmbedder.text_digest(text)
            lines.append(f'{{"digest": "{digest}", "row_index": {i}}}')
        manifest_path.write_text("\n".join(lines) + "\n")
        return FileSentenceEmbedder(manifest_path, embedding_path), matrix

    def test_lookup_by_text_digest(self, tmp_path):
        embedder, matrix = self._fixture(tmp_path, ["first text", "second text"])
        assert np.allclose(embedder.embed("second text"), matrix[1].astype(np.float64))
        assert embedder.dim == 8

    def test_unknown_text_is_provider_error(self, tmp_path):
        embedder, _ = self._fixture(tmp_path, ["only text"])
        with pytest.raises(ProviderError, match="no precomputed"):
            embedder.embed("different text")


class TestHttpEmbedder:
    def test_batch_wire_contract(self, scripted_server):
        server = scripted_server(
            [{"status": 200, "body": {"vectors": [[1.0, 0.0], [0.0, 2.0]]}}]
        )
        embedder = HttpSentenceEmbedder(server.url, dim=2, backoff_base_ms=1)
        matrix = embedder.embed_batch(["query text", "caption text"])
        assert matrix.tolist() == [[1.0, 0.0], [0.0, 2.0]]
        assert server.requests[0]["body"] == {"texts": ["query text", "caption text"]}

    def test_single_embed_uses_batch_of_one(self, scripted_server):
        server = scripted_server([{"status": 200, "body": {"vectors": [[0.5, 0.5]]}}])
        embedder = HttpSentenceEmbedder(server.url, dim=2, backoff_base_ms=1)
        vec = embedder.embed("hello")
        assert vec.tolist() == [0.5, 0.5]

    def test_retries_on_5xx(self, scripted_server):
        server = scripted_server(
            [
                {"status": 500, "body": {}},
                {"status": 200, "body": {"vectors": [[1.0]]}},
            ]
        )
        embedder = HttpSentenceEmbedder(server.url, dim=1, backoff_base_ms=1)
        assert embedder.embed("x").tolist() == [1.0]
        assert len(server.requests) == 2

    def test_wrong_cardinality_rejected(self, scripted_server):
        server = scripted_server([{"status": 200, "body": {"vectors": []}}])
        embedder = HttpSentenceEmbedder(server.url, dim=2, backoff_base_ms=1)
        with pytest.raises(ProviderError, match="malformed"):
            embedder.embed("x")

    def test_bearer_token_from_environment(self, scripted_server, monkeypatch):
        monkeypatch.setenv("CGRS_EMBED_TOKEN", "tok123")
        server = scripted_server([{"status": 200, "body": {"vectors": [[1.0]]}}])
        HttpSentenceEmbedder(server.url, dim=1, backoff_base_ms=1).embed("x")
        assert server.requests[0]["headers"]["Authorization"] == "Bearer tok123"

    def test_degenerate_vector_rejected(self, scripted_server):
        server = scripted_server([{"status": 200, "body": {"vectors": [[0.0, 0.0]]}}])
        embedder = HttpSentenceEmbedder(server.url, dim=2, backoff_base_ms=1)
        with pytest.raises(ProviderError, match="degenerate"):
            embedder.embed("x")
