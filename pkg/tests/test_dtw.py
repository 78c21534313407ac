"""Alignment engine tests against exhaustive path/window enumeration."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vidsim.dtw import (
    AlignmentResult,
    DtwConfig,
    EmbeddingSequence,
    bidtw,
    dtw,
    rank_candidates,
    subsequence_dtw,
)

from oracles import brute_force_dtw, brute_force_subsequence_dtw, sq_dist_matrix


def seq(vectors, video_id="v"):
    return EmbeddingSequence(video_id, np.atleast_2d(np.asarray(vectors, dtype=float)).T
                             if np.asarray(vectors).ndim == 1
                             else np.asarray(vectors, dtype=float))


def random_pair(rng, max_len=6, dim=3):
    n = int(rng.integers(1, max_len + 1))
    m = int(rng.integers(1, max_len + 1))
    a = rng.standard_normal((n, dim))
    b = rng.standard_normal((m, dim))
    return EmbeddingSequence("a", a), EmbeddingSequence("b", b)


class TestDtw:
    def test_identical_sequences_zero_diagonal(self):
        rng = np.random.default_rng(0)
        v = rng.standard_normal((5, 4))
        res = dtw(EmbeddingSequence("x", v), EmbeddingSequence("y", v.copy()))
        assert res.cost == pytest.approx(0.0, abs=1e-12)
        assert res.path == tuple((i, i) for i in range(5))

    def test_worked_example(self):
        res = dtw(seq([0.0, 1.0]), seq([0.0, 2.0]))
        assert res.cost == pytest.approx(1.0)
        assert res.path == ((0, 0), (1, 1))

    def test_singleton_query_forced_path(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((1, 3))
        b = rng.standard_normal((4, 3))
        res = dtw(EmbeddingSequence("a", a), EmbeddingSequence("b", b))
        expected = sq_dist_matrix(a, b).sum()
        assert res.cost == pytest.approx(expected)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            dtw(EmbeddingSequence("a", np.zeros((2, 3))),
                EmbeddingSequence("b", np.zeros((2, 4))))

    def test_matches_enumeration_on_random_pairs(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            a, b = random_pair(rng)
            assert dtw(a, b).cost == pytest.approx(
                brute_force_dtw(a.vectors, b.vectors), abs=1e-9
            )

    def test_path_is_monotone_with_unit_steps(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a, b = random_pair(rng)
            path = dtw(a, b).path
            for (i0, j0), (i1, j1) in zip(path, path[1:]):
                assert (i1 - i0, j1 - j0) in {(1, 0), (0, 1), (1, 1)}

    def test_cost_equals_path_cell_sum(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            a, b = random_pair(rng)
            res = dtw(a, b)
            d = sq_dist_matrix(a.vectors, b.vectors)
            assert res.cost == pytest.approx(
                sum(d[i, j] for i, j in res.path), abs=1e-9
            )

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_self_alignment_zero_and_nonnegative(self, s):
        rng = np.random.default_rng(s)
        a, b = random_pair(rng)
        assert dtw(a, a).cost == pytest.approx(0.0, abs=1e-12)
        assert dtw(a, b).cost >= 0.0


class TestSubsequenceDtw:
    def test_exact_window_containment(self):
        rng = np.random.default_rng(5)
        cand = rng.standard_normal((8, 3))
        query = EmbeddingSequence("q", cand[2:5].copy())
        res = subsequence_dtw(query, EmbeddingSequence("c", cand))
        assert res.cost == pytest.approx(0.0, abs=1e-12)

    def test_pointwise_minimum(self):
        res = subsequence_dtw(seq([1.0]), seq([0.0, 1.0, 2.0]))
        assert res.cost == pytest.approx(0.0)
        assert res.path == ((0, 1),)

    def test_covers_all_query_indices(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            q, c = random_pair(rng)
            path = subsequence_dtw(q, c).path
            assert {i for i, _ in path} == set(range(len(q)))

    def test_matches_window_enumeration(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            q, c = random_pair(rng)
            assert subsequence_dtw(q, c).cost == pytest.approx(
                brute_force_subsequence_dtw(q.vectors, c.vectors), abs=1e-9
            )


class TestBidtw:
    def test_full_scope_both_reversed_is_vanilla(self):
        # reversing both sequences bijects warping paths onto themselves
        rng = np.random.default_rng(8)
        for _ in range(100):
            a, b = random_pair(rng)
            forward = dtw(a, b).cost
            assert bidtw(a, b, mode="both_reversed", scope="full") == pytest.approx(
                forward, abs=1e-9
            )

    def test_one_reversed_catches_mirrored_sequence(self):
        a = seq([0.0, 2.0])
        b = seq([2.0, 0.0])
        assert dtw(a, b).cost == pytest.approx(8.0)
        assert bidtw(a, b, mode="one_reversed", scope="full") == pytest.approx(0.0)

    def test_never_exceeds_forward_cost(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            a, b = random_pair(rng)
            for mode in ("one_reversed", "both_reversed"):
                for scope in ("full", "subsequence"):
                    fwd = (dtw(a, b) if scope == "full" else subsequence_dtw(a, b)).cost
                    assert bidtw(a, b, mode=mode, scope=scope) <= fwd + 1e-12

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError, match="mode"):
            bidtw(seq([1.0]), seq([1.0]), mode="sideways")


class _Rec:
    def __init__(self, embeddings):
        self.embeddings = embeddings


class TestRanking:
    def _index(self, rng, n=6, dim=3):
        return [
            _Rec(EmbeddingSequence(f"vid{i:02d}", rng.standard_normal((4, dim))))
            for i in range(n)
        ]

    def test_identity_query_ranked_first(self):
        rng = np.random.default_rng(10)
        index = self._index(rng)
        query = EmbeddingSequence("q", index[3].embeddings.vectors.copy())
        ranking = rank_candidates(query, index, k=3)
        assert ranking[0][0] == "vid03"
        assert ranking[0][1] == pytest.approx(0.0, abs=1e-12)

    def test_equals_exhaustive_sort(self):
        rng = np.random.default_rng(11)
        index = self._index(rng)
        query = EmbeddingSequence("q", rng.standard_normal((3, 3)))
        cfg = DtwConfig(mode="one_reversed", scope="subsequence")
        ranking = rank_candidates(query, index, config=cfg)
        brute = sorted(
            (
                (r.embeddings.video_id,
                 bidtw(query, r.embeddings, mode=cfg.mode, scope=cfg.scope))
                for r in index
            ),
            key=lambda t: (t[1], t[0]),
        )
        assert ranking == brute

    def test_k_larger_than_index(self):
        rng = np.random.default_rng(12)
        index = self._index(rng, n=4)
        query = EmbeddingSequence("q", rng.standard_normal((3, 3)))
        assert len(rank_candidates(query, index, k=100)) == 4

    def test_insertion_order_invariance(self):
        rng = np.random.default_rng(13)
        index = self._index(rng)
        query = EmbeddingSequence("q", rng.standard_normal((3, 3)))
        shuffled = list(index)
        rng.shuffle(shuffled)
        assert rank_candidates(query, index) == rank_candidates(query, shuffled)

    def test_empty_index_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            rank_candidates(seq([1.0]), [])
