"""Ranking, metrics, and the three evaluation protocols against oracles."""

import dataclasses

import numpy as np
import pytest

from textkge import models
from textkge.corpus import Description, DescriptionCorpus
from textkge.errors import DataError
from textkge.evaluation import (
    EvalReport,
    ScoredCandidate,
    candidate_scores,
    link_prediction,
    lp_markdown,
    lp_ranks,
    metrics,
    rank_of,
    relation_prediction,
    reports_from_json,
    reports_to_json,
    rp_markdown,
    tp_markdown,
    triplet_classification,
    validation_mrr,
)
from textkge.graph import KnowledgeGraph, Triple
from textkge.retriever import Projection, RetrievalFuser
from textkge.trainer import TrainConfig, init_run

from oracles import direct_metrics, lp_oracle, rp_oracle, sort_rank, tp_oracle

from toydata import build_toy


def small_kg(n_entities=8, n_relations=3, n_train=12, n_valid=6, n_test=6, seed=0):
    rng = np.random.default_rng(seed)
    triples = []
    seen = set()
    while len(triples) < n_train + n_valid + n_test:
        t = Triple(
            int(rng.integers(n_entities)),
            int(rng.integers(n_relations)),
            int(rng.integers(n_entities)),
        )
        if t not in seen:
            seen.add(t)
            triples.append(t)
    return KnowledgeGraph(
        entity_names=[f"e{i}" for i in range(n_entities)],
        relation_names=[f"r{i}" for i in range(n_relations)],
        train=triples[:n_train],
        valid=triples[n_train : n_train + n_valid],
        test=triples[n_train + n_valid :],
        all_true=frozenset(triples),
    )


def small_corpus(kg, n_docs=10, m=6, seed=1):
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_docs):
        ments = set(int(e) for e in rng.integers(0, kg.n_entities, size=2))
        records.append(Description(i, f"doc {i}", frozenset(ments)))
    return DescriptionCorpus(
        records=records, vectors=rng.standard_normal((n_docs, m)).astype(np.float32)
    )


def eval_cfg(**overrides):
    base = dict(model="distmult", dim=8, k=3, text_weight=1.0, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


class TestRankOf:
    def test_unique_best(self):
        cands = [ScoredCandidate(0, 5.0), ScoredCandidate(1, 1.0), ScoredCandidate(2, 3.0)]
        assert rank_of(cands, 0) == 1.0

    def test_tie_at_best_gives_midrank(self):
        cands = [ScoredCandidate(0, 5.0), ScoredCandidate(1, 5.0), ScoredCandidate(2, 3.0)]
        assert rank_of(cands, 0) == 1.5
        assert rank_of(cands, 1) == 1.5

    def test_matches_sort_oracle_random(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            scores = rng.integers(0, 5, size=10).astype(float)  # heavy ties
            cands = [ScoredCandidate(i, float(s)) for i, s in enumerate(scores)]
            target = int(rng.integers(10))
            assert rank_of(cands, target) == sort_rank(scores.tolist(), target)

    def test_permuting_candidates_never_changes_rank(self):
        rng = np.random.default_rng(8)
        scores = rng.integers(0, 4, size=12).astype(float)
        cands = [ScoredCandidate(i, float(s)) for i, s in enumerate(scores)]
        base = rank_of(cands, 5)
        for _ in range(20):
            perm = rng.permutation(12)
            shuffled = [cands[i] for i in perm]
            assert rank_of(shuffled, 5) == base

    def test_target_absent_errors(self):
        with pytest.raises(ValueError, match="not among"):
            rank_of([ScoredCandidate(0, 1.0)], 9)


class TestMetrics:
    def test_single_perfect_rank(self):
        out = metrics([1.0])
        assert out == {"MRR": 1.0, "MR": 1.0, "Hits@1": 1.0, "Hits@10": 1.0}

    def test_direct_arithmetic(self):
        out = metrics([1.0, 2.0, 4.0])
        assert out["MRR"] == pytest.approx((1 + 0.5 + 0.25) / 3)
        assert out["MR"] == pytest.approx(7 / 3)
        assert out["Hits@1"] == pytest.approx(1 / 3)

    def test_cutoff_exclusion(self):
        assert metrics([11.0, 12.0])["Hits@10"] == 0.0

    def test_mrr_is_reciprocal_mr_for_single_rank(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            r = float(rng.integers(1, 30))
            out = metrics([r])
            assert out["MRR"] == pytest.approx(1.0 / out["MR"])

    def test_empty_and_bad_ranks_rejected(self):
        with pytest.raises(ValueError):
            metrics([])
        with pytest.raises(ValueError):
            metrics([0.5])

    def test_matches_direct_oracle(self):
        rng = np.random.default_rng(2)
        ranks = rng.integers(1, 20, size=50).astype(float)
        mine = metrics(ranks)
        oracle = direct_metrics(ranks.tolist())
        for key, val in oracle.items():
            assert mine[key] == pytest.approx(val, rel=1e-12)


class TestLinkPrediction:
    def setup_method(self):
        self.kg = small_kg()
        self.corpus = small_corpus(self.kg)
        self.cfg = eval_cfg()
        rng = np.random.default_rng(3)
        self.state = models.init_embeddings("distmult", self.kg.n_entities, self.kg.n_relations, 8, rng)
        self.proj = Projection(rng.standard_normal((8, 6)), rng.standard_normal(8))

    def _scorer(self):
        fuser = RetrievalFuser(self.corpus, self.cfg.k)
        fuser.prepare(self.proj)

        def score_fn(t: Triple) -> float:
            arr = np.array([tuple(t)], dtype=np.int64)
            return float(
                candidate_scores(self.state, self.proj, arr, fuser=fuser, text_weight=1.0)[0]
            )

        return score_fn

    @pytest.mark.parametrize("filtered", [True, False])
    def test_matches_brute_force_oracle(self, filtered):
        triples, head_ranks, tail_ranks = lp_ranks(
            self.kg, self.state, self.proj, self.corpus, self.cfg, filtered=filtered
        )
        o_head, o_tail = lp_oracle(self.kg, self._scorer(), triples, filtered)
        np.testing.assert_allclose(head_ranks, o_head, atol=1e-12)
        np.testing.assert_allclose(tail_ranks, o_tail, atol=1e-12)

    def test_tied_scores_match_oracle(self):
        # all-zero model: every candidate ties everywhere
        state = models.EmbeddingState(
            "distmult",
            np.zeros((self.kg.n_entities, 8)),
            np.zeros((self.kg.n_relations, 8)),
            8,
        )
        proj = Projection(np.zeros((8, 6)), np.zeros(8))
        triples, head_ranks, tail_ranks = lp_ranks(
            self.kg, state, proj, self.corpus, self.cfg, filtered=True
        )
        fuser = RetrievalFuser(self.corpus, self.cfg.k)
        fuser.prepare(proj)

        def score_fn(t):
            arr = np.array([tuple(t)], dtype=np.int64)
            return float(candidate_scores(state, proj, arr, fuser=fuser, text_weight=1.0)[0])

        o_head, o_tail = lp_oracle(self.kg, score_fn, triples, True)
        np.testing.assert_allclose(head_ranks, o_head, atol=1e-12)
        np.testing.assert_allclose(tail_ranks, o_tail, atol=1e-12)

    def test_filtered_dominates_raw(self):
        _, h_f, t_f = lp_ranks(self.kg, self.state, self.proj, self.corpus, self.cfg, filtered=True)
        _, h_r, t_r = lp_ranks(self.kg, self.state, self.proj, self.corpus, self.cfg, filtered=False)
        assert (h_f <= h_r + 1e-12).all()
        assert (t_f <= t_r + 1e-12).all()

    def test_memorizing_model_scores_perfectly(self, monkeypatch):
        kg = self.kg
        truth = kg.all_true

        import textkge.evaluation as ev

        def memorized(state_, proj_, triples, fuser=None, text_weight=1.0):
            return np.array(
                [1.0 if Triple(*map(int, row)) in truth else -1.0 for row in triples]
            )

        monkeypatch.setattr(ev, "candidate_scores", memorized)
        reports = ev.link_prediction(kg, self.state, self.proj, self.corpus, self.cfg)
        overall = next(r for r in reports if r.stratum == "overall")
        assert overall.metrics["MRR"] == 1.0
        assert overall.metrics["Hits@10"] == 1.0

    def test_reports_partition_and_validate(self):
        reports = link_prediction(self.kg, self.state, self.proj, self.corpus, self.cfg)
        by_stratum = {r.stratum: r for r in reports}
        assert "overall" in by_stratum
        total = by_stratum["overall"].n_queries
        partition = sum(
            r.n_queries for r in reports if r.stratum in ("with_mentions", "without_mentions")
        )
        assert partition == total
        for r in reports:
            r.validate()

    def test_empty_split_errors(self):
        kg = dataclasses.replace(self.kg, test=[])
        with pytest.raises(DataError, match="empty"):
            link_prediction(kg, self.state, self.proj, self.corpus, self.cfg)

    def test_validation_mrr_matches_reports(self):
        reports = link_prediction(
            self.kg, self.state, self.proj, self.corpus, self.cfg, split="valid"
        )
        overall = next(r for r in reports if r.stratum == "overall")
        vmrr = validation_mrr(self.kg, self.state, self.proj, self.corpus, self.cfg)
        assert vmrr == pytest.approx(overall.metrics["MRR"], rel=1e-12)


class TestRelationPrediction:
    def setup_method(self):
        self.kg = small_kg()
        self.corpus = small_corpus(self.kg)
        self.cfg = eval_cfg()
        rng = np.random.default_rng(4)
        self.state = models.init_embeddings(
            "transe", self.kg.n_entities, self.kg.n_relations, 8, rng
        )
        self.proj = Projection(rng.standard_normal((8, 6)), np.zeros(8))

    def test_matches_brute_force_oracle(self):
        reports = relation_prediction(self.kg, self.state, self.proj, self.corpus, self.cfg)
        overall = next(r for r in reports if r.stratum == "overall")
        fuser = RetrievalFuser(self.corpus, self.cfg.k)
        fuser.prepare(self.proj)

        def score_fn(t):
            arr = np.array([tuple(t)], dtype=np.int64)
            return float(
                candidate_scores(self.state, self.proj, arr, fuser=fuser, text_weight=1.0)[0]
            )

        ranks = rp_oracle(self.kg, score_fn, self.kg.test, True)
        oracle = direct_metrics(ranks)
        assert overall.metrics["MR"] == pytest.approx(oracle["MR"], abs=1e-12)
        assert overall.metrics["Hits@1"] == pytest.approx(oracle["Hits@1"], abs=1e-12)

    def test_single_relation_graph_is_trivially_perfect(self):
        kg = small_kg(n_relations=1)
        corpus = small_corpus(kg)
        state = models.init_embeddings("distmult", kg.n_entities, 1, 8, np.random.default_rng(0))
        proj = Projection(np.zeros((8, 6)), np.zeros(8))
        reports = relation_prediction(kg, state, proj, corpus, eval_cfg())
        overall = next(r for r in reports if r.stratum == "overall")
        assert overall.metrics["MR"] == 1.0
        assert overall.metrics["Hits@1"] == 1.0

    def test_strata_are_overall_and_without(self):
        reports = relation_prediction(self.kg, self.state, self.proj, self.corpus, self.cfg)
        assert {r.stratum for r in reports} <= {"overall", "without_mentions"}


class TestTripletClassification:
    def setup_method(self):
        self.kg = small_kg(n_entities=10, n_train=16, n_valid=10, n_test=10, seed=5)
        self.corpus = small_corpus(self.kg, n_docs=12)
        self.cfg = eval_cfg()

    def test_separable_scores_get_accuracy_one(self, monkeypatch):
        state = models.init_embeddings(
            "distmult", self.kg.n_entities, self.kg.n_relations, 8, np.random.default_rng(1)
        )
        proj = Projection(np.zeros((8, 6)), np.zeros(8))
        truth = self.kg.all_true

        import textkge.evaluation as ev

        def fake_scores(state_, proj_, triples, fuser=None, text_weight=1.0):
            return np.array(
                [1.0 if Triple(*map(int, row)) in truth else -1.0 for row in triples]
            )

        monkeypatch.setattr(ev, "candidate_scores", fake_scores)
        res = ev.triplet_classification(
            self.kg, state, proj, self.corpus, self.cfg, rng=np.random.default_rng(0)
        )
        for column in ("valid", "head", "tail", "all"):
            assert res.accuracy[column] == 1.0

    def test_constant_model_balanced_columns_at_half(self, monkeypatch):
        state = models.init_embeddings(
            "distmult", self.kg.n_entities, self.kg.n_relations, 8, np.random.default_rng(1)
        )
        proj = Projection(np.zeros((8, 6)), np.zeros(8))
        import textkge.evaluation as ev

        monkeypatch.setattr(
            ev, "candidate_scores", lambda *a, **k: np.zeros(len(a[2]))
        )
        res = ev.triplet_classification(
            self.kg, state, proj, self.corpus, self.cfg, rng=np.random.default_rng(0)
        )
        for column in ("head", "tail", "all"):
            assert res.accuracy[column] == pytest.approx(0.5)

    def test_matches_threshold_sweep_oracle(self):
        rng = np.random.default_rng(6)
        state = models.init_embeddings(
            "distmult", self.kg.n_entities, self.kg.n_relations, 8, rng
        )
        proj = Projection(rng.standard_normal((8, 6)), np.zeros(8))
        fuser = RetrievalFuser(self.corpus, self.cfg.k)
        res = triplet_classification(
            self.kg, state, proj, self.corpus, self.cfg, rng=np.random.default_rng(9),
            fuser=fuser,
        )
        fuser.prepare(proj)

        # regenerate the same corruption stream the engine used
        rng2 = np.random.default_rng(9)
        from textkge.graph import CORRUPT_ALL, CORRUPT_HEAD, CORRUPT_TAIL, sample_negatives

        fams = (CORRUPT_HEAD, CORRUPT_TAIL)
        fit_triples, fit_labels = [], []
        for t in self.kg.valid:
            fam = fams[int(rng2.integers(2))]
            neg = sample_negatives(self.kg, t, 1, rng2, family=fam)[0]
            fit_triples.extend([t, neg.triple])
            fit_labels.extend([True, False])

        def score_list(triples):
            arr = np.array([tuple(t) for t in triples], dtype=np.int64)
            return candidate_scores(state, proj, arr, fuser=fuser, text_weight=1.0)

        pos_scores = score_list(self.kg.test)
        neg_by_col, rel_by_col = {}, {}
        for col, fam in (("head", CORRUPT_HEAD), ("tail", CORRUPT_TAIL), ("all", CORRUPT_ALL)):
            negs = [sample_negatives(self.kg, t, 1, rng2, family=fam)[0].triple for t in self.kg.test]
            neg_by_col[col] = score_list(negs)
            rel_by_col[col] = [t.relation for t in negs]
        oracle = tp_oracle(
            pos_scores,
            neg_by_col,
            [t.relation for t in self.kg.test],
            rel_by_col,
            res.thresholds,
            res.global_threshold,
        )
        for column in ("valid", "head", "tail", "all"):
            assert res.accuracy[column] == pytest.approx(oracle[column], abs=1e-12)

    def test_swapped_labels_complement(self):
        rng = np.random.default_rng(10)
        state = models.init_embeddings(
            "distmult", self.kg.n_entities, self.kg.n_relations, 8, rng
        )
        proj = Projection(rng.standard_normal((8, 6)), np.zeros(8))
        fuser = RetrievalFuser(self.corpus, self.cfg.k)
        res = triplet_classification(
            self.kg, state, proj, self.corpus, self.cfg, rng=np.random.default_rng(11),
            fuser=fuser,
        )
        fuser.prepare(proj)
        rng2 = np.random.default_rng(11)
        from textkge.graph import CORRUPT_ALL, CORRUPT_HEAD, CORRUPT_TAIL, sample_negatives

        fams = (CORRUPT_HEAD, CORRUPT_TAIL)
        for t in self.kg.valid:
            fam = fams[int(rng2.integers(2))]
            sample_negatives(self.kg, t, 1, rng2, family=fam)

        def score_list(triples):
            arr = np.array([tuple(t) for t in triples], dtype=np.int64)
            return candidate_scores(state, proj, arr, fuser=fuser, text_weight=1.0)

        def classify(triples, scores):
            th = np.array(
                [res.thresholds.get(t.relation, res.global_threshold) for t in triples]
            )
            return scores >= th

        pos_scores = score_list(self.kg.test)
        pos_valid = classify(self.kg.test, pos_scores)
        # swapped labels with the same thresholds: every decision flips
        assert 1.0 - res.accuracy["valid"] == pytest.approx(float((~pos_valid).mean()))
        for col, fam in (("head", CORRUPT_HEAD), ("tail", CORRUPT_TAIL), ("all", CORRUPT_ALL)):
            negs = [sample_negatives(self.kg, t, 1, rng2, family=fam)[0].triple for t in self.kg.test]
            neg_valid = classify(negs, score_list(negs))
            swapped = (float((~pos_valid).sum()) + float(neg_valid.sum())) / (2 * len(self.kg.test))
            assert swapped == pytest.approx(1.0 - res.accuracy[col], abs=1e-12)

    def test_corpus_mentions_pool(self):
        rng = np.random.default_rng(12)
        state = models.init_embeddings(
            "distmult", self.kg.n_entities, self.kg.n_relations, 8, rng
        )
        proj = Projection(rng.standard_normal((8, 6)), np.zeros(8))
        res = triplet_classification(
            self.kg, state, proj, self.corpus, self.cfg,
            corrupt_source="corpus-mentions", rng=np.random.default_rng(13),
        )
        assert res.corrupt_source == "corpus-mentions"
        assert set(res.accuracy) == {"valid", "head", "tail", "all"}

    def test_requires_validation_split(self):
        kg = dataclasses.replace(self.kg, valid=[])
        state = models.init_embeddings("distmult", kg.n_entities, kg.n_relations, 8, np.random.default_rng(0))
        proj = Projection(np.zeros((8, 6)), np.zeros(8))
        with pytest.raises(DataError, match="validation"):
            triplet_classification(kg, state, proj, self.corpus, self.cfg, rng=np.random.default_rng(0))


class TestReportsIO:
    def test_json_round_trip_validates(self):
        reports = [
            EvalReport("LP", "overall", True, 12, {"MRR": 0.5, "MR": 3.0, "Hits@1": 0.2, "Hits@10": 0.9}),
            EvalReport("RP", "without_mentions", False, 6, {"MRR": 1.0, "MR": 1.0, "Hits@1": 1.0, "Hits@10": 1.0}),
        ]
        text = reports_to_json(reports)
        again = reports_from_json(text)
        assert [r.to_dict() for r in again] == [r.to_dict() for r in reports]

    def test_bad_metric_range_rejected(self):
        bad = EvalReport("LP", "overall", True, 1, {"MRR": 1.5})
        with pytest.raises(ValueError, match="MRR"):
            bad.validate()

    def test_markdown_renderers_contain_values(self):
        reports = [
            EvalReport("LP", "overall", True, 4, {"MRR": 0.25, "MR": 4.0, "Hits@1": 0.0, "Hits@10": 1.0}),
        ]
        md = lp_markdown(reports)
        assert "0.2500" in md and "| setting |" in md
        rp = [
            EvalReport("RP", "overall", True, 4, {"MRR": 0.5, "MR": 2.0, "Hits@1": 0.3, "Hits@10": 1.0}),
        ]
        assert "2.0000" in rp_markdown(rp)


class TestToyIntegration:
    def test_lp_on_toy_matches_oracle_sampled(self):
        kg, corpus = build_toy(seed=3)
        cfg = eval_cfg(model="transe", dim=16, k=5)
        rng = np.random.default_rng(0)
        state = models.init_embeddings("transe", kg.n_entities, kg.n_relations, 16, rng)
        proj = Projection(rng.standard_normal((16, corpus.text_dim)), np.zeros(16))
        sub = dataclasses.replace(kg, test=kg.test[:3])
        triples, head_ranks, tail_ranks = lp_ranks(sub, state, proj, corpus, cfg, filtered=True)
        fuser = RetrievalFuser(corpus, 5)
        fuser.prepare(proj)

        def score_fn(t):
            arr = np.array([tuple(t)], dtype=np.int64)
            return float(candidate_scores(state, proj, arr, fuser=fuser, text_weight=1.0)[0])

        o_head, o_tail = lp_oracle(sub, score_fn, triples, True)
        np.testing.assert_allclose(head_ranks, o_head, atol=1e-12)
        np.testing.assert_allclose(tail_ranks, o_tail, atol=1e-12)


class TestCachedTopKFlag:
    def test_equals_exact_when_k_covers_corpus(self):
        kg = small_kg()
        corpus = small_corpus(kg, n_docs=6)
        cfg = eval_cfg(k=6)  # selection spans the whole corpus
        rng = np.random.default_rng(14)
        state = models.init_embeddings("distmult", kg.n_entities, kg.n_relations, 8, rng)
        proj = Projection(rng.standard_normal((8, 6)), np.zeros(8))
        _, h_exact, t_exact = lp_ranks(kg, state, proj, corpus, cfg, filtered=True)
        _, h_apx, t_apx = lp_ranks(
            kg, state, proj, corpus, cfg, filtered=True, approx_cached_topk=True
        )
        np.testing.assert_allclose(h_apx, h_exact, atol=1e-12)
        np.testing.assert_allclose(t_apx, t_exact, atol=1e-12)

    def test_off_by_default_and_runs_when_on(self):
        kg = small_kg()
        corpus = small_corpus(kg, n_docs=10)
        cfg = eval_cfg(k=3)
        rng = np.random.default_rng(15)
        state = models.init_embeddings("distmult", kg.n_entities, kg.n_relations, 8, rng)
        proj = Projection(rng.standard_normal((8, 6)), np.zeros(8))
        reports = link_prediction(
            kg, state, proj, corpus, cfg, approx_cached_topk=True
        )
        for r in reports:
            r.validate()
