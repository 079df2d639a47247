import numpy as np
import pytest
from hypothesis import given, strategies as st

from momentforge.curation import CandidatePool, GeneratedMoment
from momentforge.vmr_eval import (
    MomentAnnotation,
    RetrievalPrediction,
    SlidingWindowScorer,
    TemporalSpan,
    VideoContent,
    evaluate,
    novel_word_split,
    per_sample_scores,
    read_annotations,
    read_predictions,
    temporal_iou,
    tokenize,
    write_annotations,
    write_predictions,
)

spans = st.tuples(
    st.floats(min_value=0, max_value=100, allow_nan=False),
    st.floats(min_value=0.01, max_value=100, allow_nan=False),
).map(lambda p: TemporalSpan(p[0], p[0] + p[1]))


class TestTemporalIou:
    def test_identical_spans(self):
        s = TemporalSpan(2.0, 5.0)
        assert temporal_iou(s, s) == 1.0

    def test_disjoint_spans(self):
        assert temporal_iou(TemporalSpan(0, 1), TemporalSpan(2, 3)) == 0.0

    def test_hand_value(self):
        assert temporal_iou(TemporalSpan(0, 10), TemporalSpan(5, 15)) == pytest.approx(1 / 3, abs=1e-9)

    @given(spans, spans)
    def test_symmetric_and_bounded(self, a, b):
        v = temporal_iou(a, b)
        assert v == temporal_iou(b, a)
        assert 0.0 <= v <= 1.0

    @given(spans)
    def test_equals_one_iff_equal(self, a):
        assert temporal_iou(a, a) == 1.0
        shifted = TemporalSpan(a.start + 0.5, a.end + 0.5)
        assert temporal_iou(a, shifted) < 1.0

    def test_translation_monotone(self):
        a = TemporalSpan(0, 10)
        values = [temporal_iou(a, TemporalSpan(d, d + 10)) for d in (0, 2, 4, 8, 12)]
        assert all(x >= y for x, y in zip(values, values[1:]))

    def test_invalid_span_rejected(self):
        with pytest.raises(ValueError):
            TemporalSpan(5, 5)
        with pytest.raises(ValueError):
            TemporalSpan(-1, 3)


def fixture_predictions():
    """Four queries with top-1 IoUs {1.0, 0.6, 0.4, 0.0}."""
    gt = [
        MomentAnnotation("v0", TemporalSpan(0, 10), "a person walks"),
        MomentAnnotation("v1", TemporalSpan(0, 10), "a person jumps"),
        MomentAnnotation("v2", TemporalSpan(0, 10), "a person waves"),
        MomentAnnotation("v3", TemporalSpan(0, 10), "a person sits"),
    ]
    preds = [
        RetrievalPrediction("v0", "a person walks", [TemporalSpan(0, 10)]),
        RetrievalPrediction("v1", "a person jumps", [TemporalSpan(0, 7.5)]),  # IoU 0.75? no: 7.5/10
        RetrievalPrediction("v2", "a person waves", [TemporalSpan(0, 4)]),
        RetrievalPrediction("v3", "a person sits", [TemporalSpan(20, 30)]),
    ]
    # fix v1 to IoU 0.6: [0, 6] -> 6/10
    preds[1] = RetrievalPrediction("v1", "a person jumps", [TemporalSpan(0, 6)])
    return preds, gt


class TestEvaluate:
    def test_perfect_predictions(self):
        _, gt = fixture_predictions()
        preds = [RetrievalPrediction(a.video_id, a.query, [a.span]) for a in gt]
        table = evaluate(preds, gt)
        assert all(v == 1.0 for v in table.recall.values())
        assert table.miou == 1.0

    def test_disjoint_predictions(self):
        _, gt = fixture_predictions()
        preds = [RetrievalPrediction(a.video_id, a.query, [TemporalSpan(50, 60)]) for a in gt]
        table = evaluate(preds, gt)
        assert all(v == 0.0 for v in table.recall.values())
        assert table.miou == 0.0

    def test_hand_computed_fixture(self):
        preds, gt = fixture_predictions()
        table = evaluate(preds, gt, thresholds=(0.3, 0.5, 0.7))
        assert table.recall[0.3] == pytest.approx(0.75)
        assert table.recall[0.5] == pytest.approx(0.5)
        assert table.recall[0.7] == pytest.approx(0.25)
        assert table.miou == pytest.approx(0.5)

    def test_recall_monotone_in_rank_and_threshold(self):
        preds, gt = fixture_predictions()
        extra = [
            RetrievalPrediction(p.video_id, p.query, p.ranked_spans + [gt[i].span])
            for i, p in enumerate(preds)
        ]
        r1 = evaluate(extra, gt, n=1)
        r2 = evaluate(extra, gt, n=2)
        for mu in r1.recall:
            assert r2.recall[mu] >= r1.recall[mu]
        assert r1.recall[0.3] >= r1.recall[0.5] >= r1.recall[0.7]

    def test_miou_equals_independent_mean(self):
        preds, gt = fixture_predictions()
        table = evaluate(preds, gt)
        by_key = {(p.video_id, p.query): p for p in preds}
        manual = np.mean(
            [temporal_iou(by_key[(a.video_id, a.query)].ranked_spans[0], a.span) for a in gt]
        )
        assert table.miou == pytest.approx(float(manual))

    def test_missing_prediction_rejected(self):
        preds, gt = fixture_predictions()
        with pytest.raises(ValueError, match="missing"):
            evaluate(preds[:-1], gt)

    def test_table_rendering(self):
        preds, gt = fixture_predictions()
        table = evaluate(preds, gt)
        text = table.to_text()
        assert "mIoU" in text and "R@1,IoU=0.5" in text
        assert "0.5000" in text


class TestTokenize:
    def test_strips_punctuation_case_and_stopwords(self):
        assert tokenize("The person, walks!") == ["person", "walks"]

    def test_empty_for_stopwords_only(self):
        assert tokenize("the a of") == []


def corpus_sentence(video, sentence):
    return MomentAnnotation(video, TemporalSpan(0, 4), sentence)


class TestNovelWordSplit:
    train_vocab = {"person", "walks", "jumps", "waves", "sits", "slowly", "quickly"}

    def test_all_known_words_gives_empty_split(self):
        queries = [corpus_sentence(f"v{i}", "person walks slowly") for i in range(5)]
        result = novel_word_split(queries, self.train_vocab, seed=0)
        assert result.generation == [] and result.test == []
        assert result.warning is not None

    def test_three_sentences_one_novel_word(self):
        queries = [corpus_sentence(f"v{i}", f"person spins {w}") for i, w in enumerate(["slowly", "quickly", ""])]
        queries[2] = corpus_sentence("v2", "person spins")
        result = novel_word_split(queries, self.train_vocab, seed=1)
        assert len(result.generation) == 1
        assert len(result.test) == 2
        assert result.novel_words == {"spins": 3}

    def test_twenty_sentence_corpus_multiplicities(self):
        # novel words: spins x2, crawls x3, kneels x3, stretches x5 = 13
        # sentences, plus 7 known-vocabulary fillers
        novel = [("spins", 2), ("crawls", 3), ("kneels", 3), ("stretches", 5)]
        queries = []
        i = 0
        for word, mult in novel:
            for _ in range(mult):
                queries.append(corpus_sentence(f"v{i}", f"person {word} slowly"))
                i += 1
        while len(queries) < 20:
            queries.append(corpus_sentence(f"v{i}", "person walks quickly"))
            i += 1
        result = novel_word_split(queries, self.train_vocab, seed=7)
        assert len(result.generation) == 4
        assert len(result.test) == 9
        gen_ids = {(a.video_id, a.query) for a in result.generation}
        test_ids = {(a.video_id, a.query) for a in result.test}
        assert gen_ids.isdisjoint(test_ids)
        # every test sentence contains a selected novel word
        for ann in result.test:
            assert set(tokenize(ann.query)) & set(result.novel_words)

    def test_deterministic_per_seed(self):
        queries = [corpus_sentence(f"v{i}", f"person spins take{i % 3}") for i in range(6)]
        a = novel_word_split(queries, self.train_vocab, seed=3)
        b = novel_word_split(queries, self.train_vocab, seed=3)
        assert [x.video_id for x in a.generation] == [x.video_id for x in b.generation]
        assert [x.video_id for x in a.test] == [x.video_id for x in b.test]

    def test_multi_novel_word_sentence_assigned_once(self):
        queries = [
            corpus_sentence("v0", "person spins crawls"),
            corpus_sentence("v1", "person spins"),
            corpus_sentence("v2", "person crawls"),
        ]
        result = novel_word_split(queries, self.train_vocab, seed=2)
        gen = {a.video_id for a in result.generation}
        test = {a.video_id for a in result.test}
        assert gen.isdisjoint(test)
        assert gen | test <= {"v0", "v1", "v2"}

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            novel_word_split([], self.train_vocab, seed=0)


def demo_video(video_id="v0"):
    segments = [
        (TemporalSpan(0, 4), frozenset(tokenize("a person walks slowly"))),
        (TemporalSpan(4, 8), frozenset(tokenize("a person spins quickly"))),
        (TemporalSpan(8, 12), frozenset(tokenize("a person sits"))),
    ]
    return VideoContent(video_id=video_id, duration=12.0, segments=segments)


class TestSlidingWindowScorer:
    def train_annotations(self):
        return [
            MomentAnnotation("t0", TemporalSpan(0, 4), "a person walks slowly"),
            MomentAnnotation("t1", TemporalSpan(0, 4), "a person spins quickly"),
            MomentAnnotation("t2", TemporalSpan(0, 4), "a person sits"),
        ]

    def test_known_query_localises_matching_segment(self):
        scorer = SlidingWindowScorer(self.train_annotations(), [demo_video()])
        top = scorer.score("v0", "a person spins quickly")[0]
        assert temporal_iou(top, TemporalSpan(4, 8)) > 0.5

    def test_unknown_vocabulary_degrades(self):
        vocab_without_novel = [
            MomentAnnotation("t0", TemporalSpan(0, 4), "a person walks slowly"),
            MomentAnnotation("t2", TemporalSpan(0, 4), "a person sits"),
        ]
        scorer = SlidingWindowScorer(vocab_without_novel, [demo_video()])
        informed = SlidingWindowScorer(self.train_annotations(), [demo_video()])
        blind_iou = temporal_iou(scorer.score("v0", "a person spins")[0], TemporalSpan(4, 8))
        informed_iou = temporal_iou(informed.score("v0", "a person spins")[0], TemporalSpan(4, 8))
        assert informed_iou > blind_iou

    def test_deterministic_ranking(self):
        scorer = SlidingWindowScorer(self.train_annotations(), [demo_video()])
        a = scorer.score("v0", "a person walks")
        b = scorer.score("v0", "a person walks")
        assert a == b

    def test_unknown_video_raises(self):
        scorer = SlidingWindowScorer(self.train_annotations(), [])
        with pytest.raises(KeyError):
            scorer.score("nope", "a person walks")


class OracleScorer:
    """Returns each query's ground-truth span (per-item oracle)."""

    def __init__(self, annotations):
        self.by_key = {(a.video_id, a.query): a.span for a in annotations}

    def score(self, video_id, query):
        return [self.by_key[(video_id, query)]]


class ConstantScorer:
    def score(self, video_id, query):
        return [TemporalSpan(0, 4)]


def make_pool_with_annotations():
    items = [
        GeneratedMoment(id=f"g{i}", source_video_id="v0", source_moment_index=i, edit_prompt=f"q {i}")
        for i in range(3)
    ]
    anns = {
        "g0": MomentAnnotation("v0", TemporalSpan(0, 4), "q 0"),
        "g1": MomentAnnotation("v0", TemporalSpan(2, 6), "q 1"),
        "g2": MomentAnnotation("v0", TemporalSpan(8, 12), "q 2"),
    }
    return CandidatePool(items=items), anns


class TestPerSampleScores:
    def test_oracle_scorer_scores_one(self):
        pool, anns = make_pool_with_annotations()
        report = per_sample_scores(OracleScorer(anns.values()), pool, anns)
        assert report.errors == {}
        assert all(v == 1.0 for v in report.scores.values())

    def test_constant_scorer_matches_hand_ious(self):
        pool, anns = make_pool_with_annotations()
        report = per_sample_scores(ConstantScorer(), pool, anns)
        assert report.scores["g0"] == pytest.approx(1.0)
        assert report.scores["g1"] == pytest.approx(2 / 6)
        assert report.scores["g2"] == pytest.approx(0.0)

    def test_empty_pool_gives_empty_map(self):
        report = per_sample_scores(ConstantScorer(), CandidatePool(items=[]), {})
        assert report.scores == {} and report.errors == {}

    def test_scorer_failure_marked_per_item(self):
        class FlakyScorer:
            def score(self, video_id, query):
                if query == "q 1":
                    raise RuntimeError("backend down")
                return [TemporalSpan(0, 4)]

        pool, anns = make_pool_with_annotations()
        report = per_sample_scores(FlakyScorer(), pool, anns)
        assert set(report.scores) == {"g0", "g2"}
        assert "backend down" in report.errors["g1"]


class TestAnnotationIO:
    def test_annotations_round_trip(self, tmp_path):
        anns = [
            MomentAnnotation("v0", TemporalSpan(0, 4.5), "a person walks"),
            MomentAnnotation("v1", TemporalSpan(2, 3), "a person spins"),
        ]
        path = tmp_path / "gt.jsonl"
        write_annotations(anns, path)
        back = read_annotations(path)
        assert [a.video_id for a in back] == ["v0", "v1"]
        assert back[0].span == TemporalSpan(0, 4.5)

    def test_predictions_round_trip(self, tmp_path):
        preds = [RetrievalPrediction("v0", "a person walks", [TemporalSpan(0, 2), TemporalSpan(1, 3)])]
        path = tmp_path / "pred.jsonl"
        write_predictions(preds, path)
        back = read_predictions(path)
        assert back[0].ranked_spans == [TemporalSpan(0, 2), TemporalSpan(1, 3)]

    def test_malformed_json_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"video_id": "v0"\n', encoding="utf-8")
        with pytest.raises(ValueError, match="invalid JSON"):
            read_annotations(path)
