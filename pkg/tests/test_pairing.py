import json
import math

import numpy as np
import pytest

import oracles
from denseclpp.encoder import ConfigError
from denseclpp.pairing import (
    NoNegativesError,
    PairingParams,
    all_dense_negatives,
    assign_pairs,
    match_positives,
    negative_views,
    sample_random_dense_negatives,
    score_candidate_set,
    select_cross_view_negatives,
    select_guided_negative_set,
    select_topk_positives,
    threshold_similarity,
)


def _grid(rng, cells=16, dim=5):
    return rng.standard_normal((cells, dim))


class TestMatchPositives:
    def test_self_match_orthogonal(self):
        f = np.eye(4)
        assert match_positives(f, f).tolist() == [0, 1, 2, 3]

    def test_simple(self):
        assert match_positives(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0], [1.0, 0.0]])).tolist() == [1]

    def test_tie_goes_to_lowest_index(self):
        assert match_positives(np.array([[1.0, 0.0]]), np.array([[2.0, 0.0], [1.0, 0.0]])).tolist() == [0]

    @pytest.mark.parametrize("seed", range(100))
    def test_exhaustive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a, p = _grid(rng), _grid(rng)
        assert match_positives(a, p).tolist() == oracles.argmax_positive(a, p)


class TestTopK:
    @pytest.mark.parametrize("seed", range(100))
    def test_k1_equals_argmax(self, seed):
        rng = np.random.default_rng(seed)
        a, p = _grid(rng), _grid(rng)
        assert select_topk_positives(a, p, 1)[:, 0].tolist() == match_positives(a, p).tolist()

    def test_all_cells_ordered(self):
        rng = np.random.default_rng(0)
        a, p = _grid(rng, 4), _grid(rng, 4)
        out = select_topk_positives(a, p, 4)
        assert out.tolist() == oracles.topk_positives(a, p, 4)
        assert all(sorted(row) == [0, 1, 2, 3] for row in out.tolist())

    @pytest.mark.parametrize("seed", range(20))
    def test_k3_sort_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a, p = _grid(rng), _grid(rng)
        assert select_topk_positives(a, p, 3).tolist() == oracles.topk_positives(a, p, 3)

    def test_k_out_of_range(self):
        with pytest.raises(ConfigError):
            select_topk_positives(np.eye(2), np.eye(2), 3)


class TestCrossView:
    def test_worked_example(self):
        # anchor cell 0 has similarities [0.9, 0.2, 0.5, 0.7] to the partner cells
        sims = [0.9, 0.2, 0.5, 0.7]
        partner = np.array([[s, math.sqrt(1 - s * s)] for s in sims])
        anchor = np.array([[1.0, 0.0]])
        out = select_cross_view_negatives(anchor, partner, np.array([0]), 2)
        assert out.tolist() == [[1, 2]]

    def test_n_zero_is_empty(self):
        out = select_cross_view_negatives(np.eye(3), np.eye(3), np.array([0, 1, 2]), 0)
        assert out.shape == (3, 0)

    @pytest.mark.parametrize("seed", range(100))
    def test_sort_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a, p = _grid(rng), _grid(rng)
        pos = match_positives(a, p)
        n = int(rng.integers(0, 9))
        got = select_cross_view_negatives(a, p, pos, n)
        assert got.tolist() == oracles.cross_view_negatives(a, p, pos.tolist(), n)
        for c in range(16):
            assert len(set(got[c])) == n and pos[c] not in got[c]

    def test_excludes_all_topk_positives(self):
        rng = np.random.default_rng(3)
        a, p = _grid(rng, 9), _grid(rng, 9)
        top = select_topk_positives(a, p, 3)
        got = select_cross_view_negatives(a, p, top, 6)
        for c in range(9):
            assert not set(got[c]) & set(top[c])

    def test_too_many(self):
        with pytest.raises(ConfigError):
            select_cross_view_negatives(np.eye(4), np.eye(4), np.arange(4), 4)


class TestRandomNegatives:
    def test_count_contract(self):
        out = sample_random_dense_negatives(4, 4, 0, np.random.default_rng(0))
        assert out[:, 0].tolist() == [2, 3]
        assert np.all((out[:, 1] >= 0) & (out[:, 1] < 4))

    def test_never_own_image(self):
        rng = np.random.default_rng(0)
        for anchor in range(8):
            out = sample_random_dense_negatives(8, 4, anchor, rng)
            assert len(out) == 6
            assert not set(out[:, 0].tolist()) & {anchor, anchor ^ 1}

    def test_deterministic(self):
        a = sample_random_dense_negatives(8, 16, 2, np.random.default_rng(5))
        b = sample_random_dense_negatives(8, 16, 2, np.random.default_rng(5))
        assert np.array_equal(a, b)

    def test_single_image_has_no_negatives(self):
        with pytest.raises(NoNegativesError):
            sample_random_dense_negatives(2, 4, 0, np.random.default_rng(0))

    def test_uniform_frequency(self):
        rng = np.random.default_rng(0)
        cells, draws = 4, 100_000
        counts = np.zeros(cells)
        for _ in range(draws // 2):
            out = sample_random_dense_negatives(4, cells, 0, rng)
            counts += np.bincount(out[:, 1], minlength=cells)
        p = 1 / cells
        sigma = math.sqrt(draws * p * (1 - p))
        assert np.all(np.abs(counts - draws * p) <= 3 * sigma)

    def test_full_sum(self):
        out = all_dense_negatives(6, 3, 1)
        assert len(out) == 4 * 3
        assert set(map(tuple, out.tolist())) == {(v, c) for v in (2, 3, 4, 5) for c in range(3)}

    def test_negative_views(self):
        assert negative_views(6, 3).tolist() == [0, 1, 4, 5]


class TestThreshold:
    def test_examples(self):
        assert threshold_similarity(0.3, 0.5) == -1.0
        assert threshold_similarity(0.6, 0.5) == 0.6
        assert threshold_similarity(0.5, 0.5) == -1.0

    def test_law(self):
        rng = np.random.default_rng(0)
        q, beta = rng.uniform(-1, 1, 10_000), rng.uniform(-1, 1, 10_000)
        for qi, bi in zip(q, beta):
            out = threshold_similarity(qi, bi)
            assert out == (-1.0 if qi <= bi else qi)

    def test_array(self):
        assert threshold_similarity(np.array([0.1, 0.9]), 0.5).tolist() == [-1.0, 0.9]


class TestScore:
    def test_no_threshold_is_mean_cosine(self):
        f = np.random.default_rng(0).standard_normal((4, 3))
        want = np.mean([[oracles.cosine(u, v) for v in f] for u in f])
        assert score_candidate_set(f, f, -1.0) == pytest.approx(want, abs=1e-12)

    def test_all_clipped(self):
        a = np.array([[1.0, 0.0]])
        s = np.array([[-1.0, 0.0], [0.0, 1.0]])
        assert score_candidate_set(s, a, 0.5) == -1.0

    @pytest.mark.parametrize("seed", range(20))
    def test_double_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        s, a, beta = rng.standard_normal((3, 4)), rng.standard_normal((4, 4)), rng.uniform(-1, 1)
        assert score_candidate_set(s, a, beta) == pytest.approx(oracles.candidate_score(s, a, beta), abs=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            score_candidate_set(np.zeros((0, 3)), np.ones((2, 3)), 0.0)


class TestGuided:
    def test_m1_equals_random(self):
        bank = np.random.default_rng(0).standard_normal((6, 4, 3))
        a = select_guided_negative_set(bank, 2, 1, 0.0, np.random.default_rng(9))
        b = sample_random_dense_negatives(6, 4, 2, np.random.default_rng(9))
        assert np.array_equal(a, b)

    @staticmethod
    def _bank():
        # anchor cells are e1; cell 0 of each other-image view has cosine 0.1 with e1, cell 1 has 0.3
        def vec(c):
            return [c, math.sqrt(1 - c * c)]

        anchor = [[1.0, 0.0], [1.0, 0.0]]
        other = [vec(0.1), vec(0.3)]
        return np.array([anchor, anchor, other, other], dtype=float)

    @staticmethod
    def _seed_with(first, second):
        for seed in range(1000):
            rng = np.random.default_rng(seed)
            d1 = sample_random_dense_negatives(4, 2, 0, rng)[:, 1].tolist()
            d2 = sample_random_dense_negatives(4, 2, 0, rng)[:, 1].tolist()
            if d1 == first and d2 == second:
                return seed
        raise AssertionError("no seed found")

    def test_hand_constructed_prefers_harder_set(self):
        bank = self._bank()
        seed = self._seed_with([0, 0], [1, 1])  # set A scores 0.1, set B scores 0.3
        out = select_guided_negative_set(bank, 0, 2, -1.0, np.random.default_rng(seed))
        assert out.tolist() == [[2, 1], [3, 1]]
        seed = self._seed_with([1, 1], [0, 0])
        out = select_guided_negative_set(bank, 0, 2, -1.0, np.random.default_rng(seed))
        assert out.tolist() == [[2, 1], [3, 1]]

    def test_threshold_can_flip_choice(self):
        # with beta=0.5 both sets clip to -1 and the first draw wins the tie
        bank = self._bank()
        seed = self._seed_with([0, 0], [1, 1])
        out = select_guided_negative_set(bank, 0, 2, 0.5, np.random.default_rng(seed))
        assert out.tolist() == [[2, 0], [3, 0]]

    @pytest.mark.parametrize("seed", range(100))
    def test_recomputed_scores_oracle(self, seed):
        rng = np.random.default_rng(seed)
        B = int(rng.integers(2, 5))
        cells = int(rng.integers(1, 5)) ** 2
        bank = rng.standard_normal((2 * B, cells, 3))
        anchor = int(rng.integers(0, 2 * B))
        M, beta = int(rng.integers(1, 9)), float(rng.uniform(-1, 0.5))
        replay = np.random.default_rng([seed, 1])
        draws = [sample_random_dense_negatives(2 * B, cells, anchor, replay) for _ in range(M)]
        got = select_guided_negative_set(bank, anchor, M, beta, np.random.default_rng([seed, 1]))
        assert got.tolist() == draws[oracles.guided_pick(bank, anchor, draws, beta)].tolist()


class TestAssign:
    def test_shapes_and_invariants(self):
        rng = np.random.default_rng(0)
        bank = rng.standard_normal((8, 16, 5))
        params = PairingParams(N=3)
        out = assign_pairs(bank, params, np.random.default_rng(1))
        assert out.positive_index.shape == (4, 16)
        assert out.other_view_negatives.shape == (4, 6, 2)
        assert out.cross_view_negatives.shape == (4, 16, 3)
        for i, a in enumerate(range(0, 8, 2)):
            assert not set(out.other_view_negatives[i, :, 0].tolist()) & {a, a + 1}
        assert np.all((out.positive_index >= 0) & (out.positive_index < 16))

    def test_json(self):
        bank = np.random.default_rng(0).standard_normal((4, 4, 3))
        out = assign_pairs(bank, PairingParams(), np.random.default_rng(0))
        data = json.loads(json.dumps(out.to_json()))
        assert np.array_equal(np.array(data["positive_index"]), out.positive_index)

    def test_params_validated(self):
        with pytest.raises(ConfigError):
            PairingParams(beta=1.5)
        with pytest.raises(ConfigError):
            PairingParams(N=4).check_grid(4)
        with pytest.raises(ConfigError):
            PairingParams(M=0)
