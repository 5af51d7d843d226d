import numpy as np
import pytest
from sklearn.base import clone

from cgrs.captions import MockCaptionProvider, PromptTemplate, ProviderConfig
from cgrs.embedders import HashingSentenceEmbedder
from cgrs.exceptions import ValidationError
from cgrs.reranker import (
    CaptionReranker,
    fuse_scores,
    rerank,
    rerank_batch,
    semantic_similarity,
)
from cgrs.types import Caption, CoarseResult, RankedCandidate


def _caption(image_id, text):
    return Caption(image_id, text, "mock", "hh", "m1", 256)


def _coarse(query_id, scored_ids):
    return CoarseResult(
        query_id,
        tuple(
            RankedCandidate(image_id, score, i + 1)
            for i, (image_id, score) in enumerate(scored_ids)
        ),
    )


class CountingEmbedder(HashingSentenceEmbedder):
    def __init__(self, dim=64):
        super().__init__(dim)
        self.calls = 0

    def _embed(self, text):
        self.calls += 1
        return super()._embed(text)


class TestFuseScores:
    def test_endpoints(self):
        assert fuse_scores(0.8, -0.4, alpha=1.0) == 0.8
        assert fuse_scores(0.8, -0.4, alpha=0.0) == -0.4

    def test_hand_computed(self):
        assert fuse_scores(0.8, 0.6, alpha=0.3) == pytest.approx(0.66)

    def test_alpha_out_of_range(self):
        with pytest.raises(ValidationError):
            fuse_scores(0.5, 0.5, alpha=1.2)
        with pytest.raises(ValidationError):
            fuse_scores(0.5, 0.5, alpha=-0.2)

    def test_convexity_keeps_cosine_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            s1, s2 = rng.uniform(-1, 1, size=2)
            alpha = rng.uniform(0, 1)
            assert -1.0 <= fuse_scores(s1, s2, alpha) <= 1.0


class TestSemanticSimilarity:
    def test_identical_text_gives_one(self):
        embedder = HashingSentenceEmbedder(dim=64)
        cap = _caption("img", "red tower by the river")
        assert semantic_similarity(embedder, "red tower by the river", cap) == 1.0

    def test_symmetry(self):
        embedder = HashingSentenceEmbedder(dim=64)
        a, b = "red tower near bridge", "bridge over blue water"
        assert semantic_similarity(embedder, a, _caption("i", b)) == pytest.approx(
            semantic_similarity(embedder, b, _caption("i", a))
        )

    def test_disjoint_tokens_give_zero(self):
        embedder = HashingSentenceEmbedder(dim=512)
        assert (
            semantic_similarity(
                embedder, "harbor crane gantry", _caption("i", "meadow stream willow")
            )
            == 0.0
        )


class TestRerank:
    def test_score_flip_hand_computed(self):
        coarse = _coarse("q", [("a", 0.9), ("b", 0.8)])
        captions = {"a": _caption("a", "offtopic caption"), "b": _caption("b", "query words")}

        class FixedEmbedder(HashingSentenceEmbedder):
            def _embed(self, text):
                table = {
                    "the query": np.array([1.0, 0.0]),
                    "offtopic caption": np.array([0.0, 1.0]),
                    "query words": np.array([1.0, 0.0]),
                }
                return table[text]

        fused = rerank(coarse, "the query", captions, FixedEmbedder(dim=2), alpha=0.3)
        by_id = {c.image_id: c for c in fused.candidates}
        assert by_id["a"].s_final == pytest.approx(0.27)
        assert by_id["b"].s_final == pytest.approx(0.94)
        assert [c.image_id for c in fused.candidates] == ["b", "a"]
        assert [c.rank for c in fused.candidates] == [1, 2]

    def test_alpha_one_reproduces_coarse_order(self):
        rng = np.random.default_rng(1)
        embedder = HashingSentenceEmbedder(dim=64)
        for _ in range(30):
            n = int(rng.integers(1, 20))
            ids = [f"img_{i:03d}" for i in rng.permutation(50)[:n]]
            scores = np.sort(rng.uniform(-1, 1, size=n))[::-1]
            coarse = _coarse("q", list(zip(ids, scores)))
            captions = {i: _caption(i, f"caption about {i}") for i in ids}
            fused = rerank(coarse, "some aerial query", captions, embedder, alpha=1.0)
            assert [c.image_id for c in fused.candidates] == list(ids)

    def test_alpha_zero_orders_by_semantic_alone(self):
        rng = np.random.default_rng(2)
        embedder = HashingSentenceEmbedder(dim=64)
        vocab = ["tower", "lake", "roof", "court", "road", "tree", "dome", "gate"]
        for _ in range(30):
            n = int(rng.integers(2, 15))
            ids = [f"img_{i:03d}" for i in rng.permutation(40)[:n]]
            scores = np.sort(rng.uniform(-1, 1, size=n))[::-1]
            coarse = _coarse("q", list(zip(ids, scores)))
            captions = {
                i: _caption(i, " ".join(rng.choice(vocab, size=4))) for i in ids
            }
            query = " ".join(rng.choice(vocab, size=3))
            fused = rerank(coarse, query, captions, embedder, alpha=0.0)
            qv = embedder.embed(query)
            expected = sorted(
                ids,
                key=lambda i: (
                    -float(
                        np.dot(qv, embedder.embed(captions[i].text))
                        / (np.linalg.norm(qv) * np.linalg.norm(embedder.embed(captions[i].text)))
                    ),
                    i,
                ),
            )
            assert [c.image_id for c in fused.candidates] == expected

    def test_permutation_only_contract(self):
        rng = np.random.default_rng(3)
        embedder = HashingSentenceEmbedder(dim=64)
        for _ in range(30):
            n = int(rng.integers(1, 20))
            ids = [f"img_{i:03d}" for i in rng.permutation(99)[:n]]
            scores = np.sort(rng.uniform(-1, 1, size=n))[::-1]
            coarse = _coarse("q", list(zip(ids, scores)))
            captions = {i: _caption(i, f"scene {i} with roads") for i in ids}
            fused = rerank(coarse, "roads and fields", captions, embedder, alpha=0.4)
            assert sorted(fused.image_ids()) == sorted(coarse.image_ids())

    def test_query_embedded_exactly_once(self):
        embedder = CountingEmbedder(dim=64)
        ids = [f"img_{i}" for i in range(20)]
        coarse = _coarse("q", [(i, 1.0 - 0.01 * k) for k, i in enumerate(ids)])
        captions = {i: _caption(i, f"caption {i}") for i in ids}
        rerank(coarse, "the query text", captions, embedder, alpha=0.3)
        assert embedder.calls == 21  # 20 captions + 1 query

    def test_missing_caption_hard_error_by_default(self):
        coarse = _coarse("q", [("a", 0.9), ("b", 0.8)])
        captions = {"a": _caption("a", "text")}
        with pytest.raises(ValidationError, match="'b'"):
            rerank(coarse, "query", captions, HashingSentenceEmbedder(dim=64))

    def test_missing_caption_penalize_policy(self):
        coarse = _coarse("q", [("a", 0.9), ("b", 0.8)])
        captions = {"a": _caption("a", "query match text")}
        fused = rerank(
            coarse,
            "query match text",
            captions,
            HashingSentenceEmbedder(dim=64),
            alpha=0.3,
            missing_caption_policy="penalize",
        )
        assert fused.missing_caption_policy == "penalize"
        by_id = {c.image_id: c for c in fused.candidates}
        assert by_id["b"].s_sem == -1.0
        assert by_id["a"].s_sem == 1.0
        assert fused.candidates[0].image_id == "a"

    def test_unknown_policy_rejected(self):
        coarse = _coarse("q", [("a", 0.9)])
        with pytest.raises(ValidationError, match="policy"):
            rerank(coarse, "q", {}, HashingSentenceEmbedder(dim=64),
                   missing_caption_policy="shrug")

    def test_raising_semantic_score_never_lowers_rank(self):
        # keep every other candidate fixed; make one caption match the
        # query better and check its rank only improves (alpha < 1)
        embedder = HashingSentenceEmbedder(dim=256)
        ids = ["a", "b", "c", "d"]
        coarse = _coarse("q", [("a", 0.9), ("b", 0.7), ("c", 0.5), ("d", 0.3)])
        query = "granite tower with arched gate"
        low = {i: _caption(i, f"unrelated scene {i}") for i in ids}
        for target in ids:
            for improved_text in (
                "granite plaza",
                "granite tower plaza",
                "granite tower with arched gate",
            ):
                weak = dict(low)
                strong = dict(low)
                strong[target] = _caption(target, improved_text)
                before = rerank(coarse, query, weak, embedder, alpha=0.3)
                after = rerank(coarse, query, strong, embedder, alpha=0.3)
                rank_before = before.image_ids().index(target)
                rank_after = after.image_ids().index(target)
                assert rank_after <= rank_before

    def test_s_final_stays_in_cosine_range(self):
        rng = np.random.default_rng(5)
        embedder = HashingSentenceEmbedder(dim=64)
        for _ in range(20):
            n = int(rng.integers(1, 10))
            ids = [f"img_{i}" for i in range(n)]
            scores = np.sort(rng.uniform(-1, 1, size=n))[::-1]
            coarse = _coarse("q", list(zip(ids, scores)))
            captions = {i: _caption(i, f"words about {i}") for i in ids}
            fused = rerank(coarse, "some words", captions, embedder, alpha=float(rng.uniform(0, 1)))
            for cand in fused.candidates:
                assert -1.0 <= cand.s_final <= 1.0


def test_remote_embedder_sees_one_caption_batch_per_query(scripted_server):
    from cgrs.embedders import HttpSentenceEmbedder

    server = scripted_server(
        [
            {"status": 200, "body": {"vectors": [[1.0, 0.0]]}},  # query
            {"status": 200, "body": {"vectors": [[1.0, 0.0], [0.0, 1.0]]}},  # captions
        ]
    )
    embedder = HttpSentenceEmbedder(server.url, dim=2, backoff_base_ms=1)
    coarse = _coarse("q", [("a", 0.9), ("b", 0.8)])
    captions = {"a": _caption("a", "alpha caption"), "b": _caption("b", "beta caption")}
    fused = rerank(coarse, "the query", captions, embedder, alpha=0.3)
    assert len(server.requests) == 2
    assert server.requests[1]["body"] == {"texts": ["alpha caption", "beta caption"]}
    assert fused.candidates[0].image_id == "a"


class TestRerankBatch:
    def test_missing_query_text_rejected(self):
        coarse = [_coarse("q1", [("a", 0.5)])]
        with pytest.raises(ValidationError, match="q1"):
            rerank_batch(coarse, {}, {"a": _caption("a", "x")}, HashingSentenceEmbedder(dim=64))

    def test_batch_matches_single(self):
        embedder = HashingSentenceEmbedder(dim=64)
        coarse = [_coarse("q1", [("a", 0.5), ("b", 0.4)])]
        captions = {"a": _caption("a", "alpha text"), "b": _caption("b", "beta text")}
        single = rerank(coarse[0], "alpha text", captions, embedder, alpha=0.3)
        batch = rerank_batch(coarse, {"q1": "alpha text"}, captions, embedder, alpha=0.3)
        assert batch[0] == single


class TestCaptionRerankerEstimator:
    def test_fit_transform(self):
        captions = [_caption("a", "north tower"), _caption("b", "south lake")]
        est = CaptionReranker(alpha=0.3, embedder=HashingSentenceEmbedder(dim=64))
        coarse = [_coarse("q1", [("a", 0.9), ("b", 0.8)])]
        fused = est.fit(captions).transform(coarse, {"q1": "north tower"})
        assert fused[0].candidates[0].image_id == "a"

    def test_get_params_and_clone(self):
        est = CaptionReranker(alpha=0.7, missing_caption_policy="penalize")
        params = est.get_params()
        assert params["alpha"] == 0.7
        assert params["missing_caption_policy"] == "penalize"
        assert clone(est).get_params()["alpha"] == 0.7

    def test_transform_before_fit_rejected(self):
        with pytest.raises(ValidationError):
            CaptionReranker().transform([], {})


def test_end_to_end_mock_captions(tiny_store):
    """Recall-ceiling sanity: reranking permutes the coarse set, so the
    candidate id sets match at full depth."""
    from cgrs.retriever import retrieve_batch

    provider = MockCaptionProvider(ProviderConfig())
    template = PromptTemplate()
    captions = {
        rec.image_id: provider.fetch(rec, template) for rec in tiny_store.records
    }
    coarse = retrieve_batch(tiny_store, np.array([[1.0, 0.2]]), k=3, query_ids=["q"])
    fused = rerank_batch(
        coarse, {"q": "aerial view"}, captions, HashingSentenceEmbedder(dim=64), alpha=0.3
    )
    assert sorted(fused[0].image_ids()) == sorted(coarse[0].image_ids())
