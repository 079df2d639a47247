import numpy as np
import pytest

from momentforge.curation import (
    AssembledVideo,
    CandidatePool,
    EmbeddingSet,
    GeneratedMoment,
    VideoMoment,
    assemble_variant,
    build_training_set,
    harmonic_score,
    pool_fidelity_summary,
    prompt_fidelity,
    qualitative_select,
    quantitative_select,
    read_embeddings,
    read_pool,
    read_scores_csv,
    read_video_doc,
    safe_harmonic_score,
    structure_fidelity,
    write_embeddings,
    write_pool,
    write_scores_csv,
    write_video_doc,
)
from momentforge.frames import Frame
from momentforge.vmr_eval import MomentAnnotation, TemporalSpan


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def make_item(idx, h_score=0.0, prompt_fid=0.0, struct_fid=0.0):
    return GeneratedMoment(
        id=f"gen{idx:03d}",
        source_video_id="vid00",
        source_moment_index=0,
        edit_prompt="a person spins",
        prompt_fid=prompt_fid,
        struct_fid=struct_fid,
        h_score=h_score,
    )


class TestFidelityMetrics:
    def test_prompt_fidelity_identical_vectors(self):
        vec = unit([1.0, 2.0, 3.0])
        m = make_item(0)
        m.joint_embeddings = EmbeddingSet(per_frame=np.stack([vec, vec]), source_tag="joint")
        assert prompt_fidelity(m, vec) == pytest.approx(1.0)

    def test_prompt_fidelity_orthogonal(self):
        m = make_item(0)
        m.joint_embeddings = EmbeddingSet(per_frame=np.array([[1.0, 0.0], [1.0, 0.0]]))
        assert prompt_fidelity(m, np.array([0.0, 1.0])) == pytest.approx(0.0)

    def test_prompt_fidelity_hand_arithmetic(self):
        # cosines 0.2 and 0.4 -> mean 0.3
        prompt = np.array([1.0, 0.0])
        f1 = np.array([0.2, np.sqrt(1 - 0.04)])
        f2 = np.array([0.4, np.sqrt(1 - 0.16)])
        m = make_item(0)
        m.joint_embeddings = EmbeddingSet(per_frame=np.stack([f1, f2]))
        assert prompt_fidelity(m, prompt) == pytest.approx(0.3)

    def test_prompt_fidelity_zero_norm_rejected(self):
        m = make_item(0)
        m.joint_embeddings = EmbeddingSet(per_frame=np.array([[1.0, 0.0]]))
        with pytest.raises(ValueError):
            prompt_fidelity(m, np.zeros(2))

    def test_structure_fidelity_identity_and_negation(self):
        rng = np.random.default_rng(0)
        src = EmbeddingSet(per_frame=rng.standard_normal((4, 6)))
        assert structure_fidelity(src, src) == pytest.approx(1.0)
        neg = EmbeddingSet(per_frame=-src.per_frame)
        assert structure_fidelity(src, neg) == pytest.approx(-1.0)

    def test_structure_fidelity_mixed_hand_value(self):
        src = EmbeddingSet(per_frame=np.array([[1.0, 0.0], [1.0, 0.0]]))
        gen = EmbeddingSet(per_frame=np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert structure_fidelity(src, gen) == pytest.approx(0.5)

    def test_structure_fidelity_length_mismatch(self):
        a = EmbeddingSet(per_frame=np.ones((2, 3)))
        b = EmbeddingSet(per_frame=np.ones((3, 3)))
        with pytest.raises(ValueError):
            structure_fidelity(a, b)

    def test_recomputed_scores_match_stored(self):
        rng = np.random.default_rng(1)
        emb = rng.standard_normal((3, 8))
        prompt = rng.standard_normal(8)
        m = make_item(0)
        m.joint_embeddings = EmbeddingSet(per_frame=emb)
        m.prompt_fid = prompt_fidelity(m, prompt)
        assert prompt_fidelity(m, prompt) == m.prompt_fid


class TestHarmonicScore:
    def test_reported_pairs(self):
        assert harmonic_score(0.263, 0.568) == pytest.approx(0.359, abs=1e-3)
        assert harmonic_score(0.282, 0.397) == pytest.approx(0.329, abs=1e-3)

    def test_equal_inputs_return_input(self):
        for x in (0.1, 0.5, 2.0):
            assert harmonic_score(x, x) == pytest.approx(x)

    def test_nonpositive_rejected(self):
        for p, s in [(0.0, 0.5), (0.5, 0.0), (-0.1, 0.5)]:
            with pytest.raises(ValueError):
                harmonic_score(p, s)

    def test_bounded_by_arithmetic_mean_and_max(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            p, s = rng.uniform(1e-6, 2.0, size=2)
            h = harmonic_score(p, s)
            assert h <= (p + s) / 2 + 1e-12
            assert h <= max(p, s) + 1e-12

    def test_safe_variant_collapses_to_zero(self):
        assert safe_harmonic_score(-0.2, 0.5) == 0.0
        assert safe_harmonic_score(0.2, 0.5) == harmonic_score(0.2, 0.5)


class TestSelection:
    def make_pool(self, rng, n=50):
        items = [make_item(i, h_score=float(rng.random())) for i in range(n)]
        rng.shuffle(items)
        return CandidatePool(items=items, provenance="test")

    def test_full_pool_sorted(self):
        rng = np.random.default_rng(3)
        pool = self.make_pool(rng, 10)
        out = quantitative_select(pool, 10)
        assert [m.id for m in out.items] == [
            m.id for m in sorted(pool.items, key=lambda m: (-m.h_score, m.id))
        ]

    def test_k_one_is_argmax(self):
        rng = np.random.default_rng(4)
        pool = self.make_pool(rng, 10)
        out = quantitative_select(pool, 1)
        assert out.items[0].h_score == max(m.h_score for m in pool.items)

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(5)
        pool = self.make_pool(rng, 50)
        out = quantitative_select(pool, 10)
        oracle = sorted(pool.items, key=lambda m: (-m.h_score, m.id))[:10]
        assert [m.id for m in out.items] == [m.id for m in oracle]

    def test_idempotent_and_permutation_invariant(self):
        rng = np.random.default_rng(6)
        pool = self.make_pool(rng, 30)
        once = quantitative_select(pool, 12)
        twice = quantitative_select(once, 12)
        assert [m.id for m in once.items] == [m.id for m in twice.items]
        shuffled = CandidatePool(items=list(reversed(pool.items)), provenance=pool.provenance)
        assert [m.id for m in quantitative_select(shuffled, 12).items] == [m.id for m in once.items]

    def test_k_out_of_range(self):
        rng = np.random.default_rng(7)
        pool = self.make_pool(rng, 5)
        with pytest.raises(ValueError):
            quantitative_select(pool, 6)

    def test_qualitative_picks_lowest(self):
        pool = CandidatePool(items=[make_item(i) for i in range(3)])
        scores = {"gen000": 0.9, "gen001": 0.1, "gen002": 0.5}
        out = qualitative_select(pool, scores, 1)
        assert [m.id for m in out.items] == ["gen001"]

    def test_qualitative_matches_bottom_sort_oracle(self):
        rng = np.random.default_rng(8)
        pool = self.make_pool(rng, 40)
        scores = {m.id: float(rng.random()) for m in pool.items}
        out = qualitative_select(pool, scores, 5)
        oracle = sorted(pool.items, key=lambda m: (scores[m.id], m.id))[:5]
        assert [m.id for m in out.items] == [m.id for m in oracle]

    def test_qualitative_requires_all_scores(self):
        pool = CandidatePool(items=[make_item(0), make_item(1)])
        with pytest.raises(ValueError, match="missing"):
            qualitative_select(pool, {"gen000": 0.5}, 1)

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            CandidatePool(items=[make_item(0), make_item(0)])


class TestPoolSummary:
    def test_aggregate_vs_per_sample_modes(self):
        items = [
            make_item(0, prompt_fid=0.2, struct_fid=0.6, h_score=safe_harmonic_score(0.2, 0.6)),
            make_item(1, prompt_fid=0.4, struct_fid=0.4, h_score=safe_harmonic_score(0.4, 0.4)),
        ]
        pool = CandidatePool(items=items)
        agg = pool_fidelity_summary(pool, mode="aggregate")
        per = pool_fidelity_summary(pool, mode="per_sample")
        assert agg["harmonic"] == pytest.approx(harmonic_score(0.3, 0.5))
        assert per["harmonic"] == pytest.approx(np.mean([items[0].h_score, items[1].h_score]))
        assert agg["harmonic"] != per["harmonic"]


def tiled_video(spans, frames_per_moment=4):
    moments = []
    for j, (s, e) in enumerate(spans):
        px = np.full((8, 8), 0.2)
        frames = [Frame(pixels=px, index=i) for i in range(frames_per_moment)]
        moments.append(VideoMoment(span=TemporalSpan(s, e), query=f"a person act{j}", frames=frames))
    return moments


class TestAssembleVariant:
    def test_replace_preserves_spans_and_count(self):
        video = tiled_video([(0, 5), (5, 9), (9, 12)])
        edited = [Frame(pixels=np.full((8, 8), 0.9), index=i) for i in range(4)]
        out = assemble_variant(video, 1, edited, "replace", "a person spins")
        assert len(out) == 3
        assert [(m.span.start, m.span.end) for m in out] == [(0, 5), (5, 9), (9, 12)]
        assert out[1].query == "a person spins"
        assert out[0].query == "a person act0"

    def test_inject_shifts_downstream_spans(self):
        # moment 1 spans [5,9] with 4 frames (1s per frame); a 4-frame edit
        # injects 4 units at t=9: downstream [9,12] -> [13,16]
        video = tiled_video([(0, 5), (5, 9), (9, 12)])
        edited = [Frame(pixels=np.full((8, 8), 0.9), index=i) for i in range(4)]
        out = assemble_variant(video, 1, edited, "inject", "a person spins")
        spans = [(m.span.start, m.span.end) for m in out]
        assert spans == [(0, 5), (5, 9), (9, 13), (13, 16)]
        assert out[2].query == "a person spins"
        assert len(out) == 4

    def test_inject_before(self):
        video = tiled_video([(0, 4), (4, 8)])
        edited = [Frame(pixels=np.full((8, 8), 0.9), index=i) for i in range(4)]
        out = assemble_variant(video, 1, edited, "inject", "a person spins", insert_before=True)
        spans = [(m.span.start, m.span.end) for m in out]
        assert spans == [(0, 4), (4, 8), (8, 12)]
        assert out[1].query == "a person spins"

    def test_replace_length_mismatch_rejected(self):
        video = tiled_video([(0, 4)])
        edited = [Frame(pixels=np.zeros((8, 8)), index=i) for i in range(3)]
        with pytest.raises(ValueError, match="frames"):
            assemble_variant(video, 0, edited, "replace", "x y")

    def test_index_out_of_range(self):
        video = tiled_video([(0, 4)])
        with pytest.raises(ValueError, match="out of range"):
            assemble_variant(video, 1, video[0].frames, "replace", "x y")

    def test_random_assemblies_keep_spans_ordered(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            n = int(rng.integers(2, 6))
            bounds = np.cumsum(rng.integers(2, 6, size=n + 1))[:-1].astype(float)
            spans = [(float(a), float(b)) for a, b in zip(np.concatenate([[0.0], bounds[:-1]]), bounds)]
            video = tiled_video(spans)
            i = int(rng.integers(n))
            mode = "replace" if rng.random() < 0.5 else "inject"
            edited = [Frame(pixels=np.full((8, 8), 0.7), index=k) for k in range(4)]
            out = assemble_variant(video, i, edited, mode, "a person spins")
            total_before = video[-1].span.end
            if mode == "replace":
                assert len(out) == len(video)
                assert out[-1].span.end == total_before
            else:
                assert len(out) == len(video) + 1
                injected = video[i].span.length / len(video[i].frames) * 4
                assert out[-1].span.end == pytest.approx(total_before + injected)
            for a, b in zip(out, out[1:]):
                assert a.span.start < b.span.start
                assert a.span.end <= b.span.start + 1e-9


class TestBuildTrainingSet:
    def source(self, n=10):
        return {
            f"src{i:02d}": MomentAnnotation(f"vid{i:02d}", TemporalSpan(0, 4), "a person walks")
            for i in range(n)
        }

    def test_empty_selection_returns_source(self):
        src = self.source()
        pool = CandidatePool(items=[])
        out = build_training_set(src, pool, {})
        assert out == src

    def test_counts_add_exactly(self):
        src = self.source(10)
        items = [make_item(i) for i in range(3)]
        pool = CandidatePool(items=items)
        anns = {m.id: MomentAnnotation("var", TemporalSpan(0, 4), m.edit_prompt) for m in items}
        out = build_training_set(src, pool, anns)
        assert len(out) == 13

    def test_id_collision_rejected(self):
        src = {"gen000": MomentAnnotation("v", TemporalSpan(0, 1), "q w")}
        pool = CandidatePool(items=[make_item(0)])
        anns = {"gen000": MomentAnnotation("v", TemporalSpan(0, 1), "q w")}
        with pytest.raises(ValueError, match="collision"):
            build_training_set(src, pool, anns)


class TestFileFormats:
    def test_embeddings_round_trip(self, tmp_path):
        rng = np.random.default_rng(10)
        emb = EmbeddingSet(per_frame=rng.standard_normal((4, 16)).astype(np.float32).astype(float), source_tag="joint")
        path = tmp_path / "m.joint.emb"
        write_embeddings(emb, path)
        back = read_embeddings(path, source_tag="joint")
        assert np.array_equal(back.per_frame, emb.per_frame)
        assert back.source_tag == "joint"

    def test_embeddings_bad_magic(self, tmp_path):
        path = tmp_path / "bad.emb"
        path.write_bytes(b"XXXX" + b"\0" * 8)
        with pytest.raises(ValueError, match="magic"):
            read_embeddings(path)

    def test_pool_round_trip_with_embeddings(self, tmp_path):
        rng = np.random.default_rng(11)
        items = []
        for i in range(3):
            m = make_item(i, h_score=0.5 - 0.1 * i, prompt_fid=0.4, struct_fid=0.7)
            m.frames_path = f"frames/gen{i:03d}.bin"
            m.joint_path = f"emb/gen{i:03d}.joint.emb"
            m.structure_path = f"emb/gen{i:03d}.structure.emb"
            emb = EmbeddingSet(per_frame=rng.standard_normal((2, 8)))
            write_embeddings(emb, tmp_path / m.joint_path)
            write_embeddings(emb, tmp_path / m.structure_path)
            items.append(m)
        pool = CandidatePool(items=items, provenance="cfg123")
        path = tmp_path / "pool.jsonl"
        write_pool(pool, path)
        back = read_pool(path, load_embeddings=True)
        assert back.provenance == "cfg123"
        assert [m.id for m in back.items] == [m.id for m in items]
        assert back.items[0].joint_embeddings is not None
        assert back.items[0].h_score == pytest.approx(0.5)

    def test_scores_csv_round_trip(self, tmp_path):
        scores = {"a": 0.25, "b": 1.0 / 3.0}
        path = tmp_path / "scores.csv"
        write_scores_csv(scores, path)
        assert read_scores_csv(path) == scores

    def test_video_doc_round_trip(self, tmp_path):
        from momentforge.frames import write_packed_frames

        video = tiled_video([(0, 4), (4, 8)])
        for j, m in enumerate(video):
            rel = f"frames/m{j}.bin"
            write_packed_frames(m.frames, tmp_path / rel)
            m.frames_path = rel
        doc = AssembledVideo(video_id="vid00", moments=video)
        path = tmp_path / "video.json"
        write_video_doc(doc, path)
        back = read_video_doc(path, load_frames=True)
        assert back.video_id == "vid00"
        assert len(back.moments) == 2
        assert back.moments[0].span == TemporalSpan(0, 4)
        assert len(back.moments[0].frames) == 4
