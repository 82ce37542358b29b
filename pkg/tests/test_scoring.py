import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aggdp.aggregation import build_hard_aggregation, solve_aggregate_vi
from aggdp.errors import ValidationError
from aggdp.mdp import evaluate_policy, random_mdp, solve_exact_vi
from aggdp.scoring import (
    builtin_score,
    certify_beta,
    check_score_bound,
    make_intervals,
    partition_by_score_vector,
    partition_by_scores,
    partition_by_scores_within_sets,
    quantization_error,
    quantile_breakpoints,
)
from aggdp.ssp import chain_fixture, ssp_aggregate_solve


def _brute_spread(V, cells):
    return max(abs(V[i] - V[j]) for c in cells for i in c for j in c)


class TestPartition:
    def test_two_state_by_cost(self, ts):
        V = evaluate_policy(ts, [0, 0])
        part = partition_by_scores(V, q=2)
        assert part.cells == [[1], [0]]
        np.testing.assert_allclose(solve_aggregate_vi(ts, part.scheme, 1e-12).r, [2 / 3, 4 / 3], atol=1e-10)

    def test_explicit_breakpoints(self):
        part = partition_by_scores(np.arange(1.0, 7.0), breakpoints=[4.0])
        assert part.cells == [[0, 1, 2], [3, 4, 5]]

    def test_half_open_last_closed(self):
        iv = make_intervals([0.0, 1.0, 2.0], breakpoints=[1.0])
        assert iv.index([0.0, 0.999, 1.0, 2.0]).tolist() == [0, 0, 1, 1]

    def test_empty_cells_dropped(self):
        part = partition_by_scores(np.array([0.0, 0.1, 9.9, 10.0]), q=5, method="equal_width")
        assert part.q == 2
        assert part.dropped == 3
        assert part.keys == [(0,), (4,)]

    def test_constant_scores_collapse(self):
        with pytest.warns(UserWarning, match="constant"):
            part = partition_by_scores(np.ones(5), q=3)
        assert part.q == 1 and part.collapsed

    def test_constant_chain_score_is_exact(self):
        chain = chain_fixture(50, "a")
        part = partition_by_scores(np.full(50, 3.0), q=1)
        np.testing.assert_allclose(ssp_aggregate_solve(chain.mdp, part.scheme), [1.0], atol=1e-9)

    def test_quantile_balances_counts(self):
        part = partition_by_scores(np.arange(100.0), q=4)
        assert [len(c) for c in part.cells] == [25, 25, 25, 25]

    def test_quantile_never_splits_ties(self):
        V = np.array([0, 0, 0, 0, 1, 2, 3, 3])
        b = quantile_breakpoints(V, 3)
        assert set(b) <= set(V.tolist())

    def test_unknown_method(self):
        with pytest.raises(ValidationError):
            partition_by_scores(np.arange(3.0), q=2, method="kmeans")

    def test_non_finite_scores(self):
        with pytest.raises(ValidationError):
            partition_by_scores(np.array([0.0, np.nan]), q=2)


class TestQuantization:
    def test_singletons(self):
        assert quantization_error(np.arange(4.0), [[0], [1], [2], [3]]) == 0.0

    def test_pair(self):
        assert quantization_error(np.array([0.0, 1.0]), [[0, 1]]) == 1.0

    def test_chain_equal_width_matches_scan(self):
        chain = chain_fixture(50, "b")
        part = partition_by_scores(chain.J_mu, q=5, method="equal_width")
        assert quantization_error(chain.J_mu, part.cells) == _brute_spread(chain.J_mu, part.cells)

    @pytest.mark.filterwarnings("ignore:scores are constant")
    @settings(max_examples=50, deadline=None)
    @given(values=st.lists(st.floats(-100, 100), min_size=2, max_size=30), q=st.integers(1, 6))
    def test_refinement_never_increases(self, values, q):
        V = np.array(values)
        coarse = partition_by_scores(V, q=q)
        fine = partition_by_scores_within_sets(V, coarse.cells, 2)
        fine_cells = list(fine.disagg_sets)
        assert quantization_error(V, fine_cells) <= quantization_error(V, coarse.cells) + 1e-12

    @pytest.mark.filterwarnings("ignore:scores are constant")
    @settings(max_examples=50, deadline=None)
    @given(values=st.lists(st.integers(0, 5), min_size=1, max_size=30), q=st.integers(1, 6))
    def test_membership_depends_on_score_only(self, values, q):
        V = np.array(values, dtype=float)
        part = partition_by_scores(V, q=q)
        for i in range(len(V)):
            for j in range(len(V)):
                if V[i] == V[j]:
                    assert part.feature[i] == part.feature[j]


class TestScoreBound:
    def test_exact_scores_singletons(self, rng):
        mdp = random_mdp(8, 3, 0.9, rng)
        J = solve_exact_vi(mdp, 1e-12).J
        part = partition_by_scores(J, q=8)
        rep = check_score_bound(mdp, J, part.cells)
        assert rep.delta == 0.0 and rep.ok and rep.max_gap <= 1e-9

    def test_scaled_scores_certify_half(self, rng):
        mdp = random_mdp(8, 3, 0.9, rng)
        J = solve_exact_vi(mdp, 1e-12).J
        part = partition_by_scores(2 * J, q=3)
        rep = check_score_bound(mdp, 2 * J, part.cells)
        assert rep.beta == pytest.approx(0.5)
        assert rep.ok

    @pytest.mark.parametrize("seed", range(10))
    def test_noisy_scores(self, seed):
        rng = np.random.default_rng(seed)
        mdp = random_mdp(10, 3, 0.9, rng)
        V = solve_exact_vi(mdp, 1e-12).J + rng.uniform(-0.01, 0.01, 10)
        part = partition_by_scores(V, q=3)
        rep = check_score_bound(mdp, V, part.cells)
        assert rep.hypothesis_ok and rep.ok

    def test_failed_hypothesis_flagged(self, rng):
        mdp = random_mdp(6, 2, 0.9, rng)
        V = np.zeros(6)
        rep = check_score_bound(mdp, V, [list(range(6))], beta=1.0)
        assert not rep.hypothesis_ok and not rep.ok
        assert rep.violations == []

    def test_certify_beta_infinite_on_shared_score(self):
        assert certify_beta([0.0, 1.0], [2.0, 2.0], [[0, 1]]) == np.inf


class TestWithinSetsAndVectors:
    def test_one_set_matches_plain(self):
        V = np.array([3.0, 1.0, 2.0, 5.0, 4.0])
        a = partition_by_scores_within_sets(V, [range(5)], 2)
        b = partition_by_scores(V, q=2)
        assert [sorted(s) for s in a.disagg_sets] == [sorted(c) for c in b.cells]

    def test_two_sets_same_range(self):
        V = np.array([0.0, 1.0, 2.0, 3.0, 0.0, 1.0, 2.0, 3.0])
        s = partition_by_scores_within_sets(V, [[0, 1, 2, 3], [4, 5, 6, 7]], 2)
        assert s.q == 4

    def test_chain_odd_even(self):
        chain = chain_fixture(6, "b")
        odd, even = [0, 2, 4], [1, 3, 5]
        s = partition_by_scores_within_sets(chain.J_mu, [odd, even], 2)
        # J_mu = (1, 2, 3, 4, 5, 0): odd states score {1, 3 | 5}, even states {0, 2 | 4}
        assert [sorted(c) for c in s.disagg_sets] == [[0, 2], [4], [1, 5], [3]]

    def test_vector_s1_reduces(self):
        V = np.array([0.3, 0.1, 0.9, 0.5])
        a = partition_by_score_vector(V[:, None], q=2)
        b = partition_by_scores(V, q=2)
        assert a.cells == b.cells

    def test_constant_second_dimension(self):
        V = np.array([0.3, 0.1, 0.9, 0.5])
        a = partition_by_score_vector(np.column_stack([V, np.ones(4)]), q=[2, 2])
        assert a.cells == partition_by_scores(V, q=2).cells

    def test_grid_matches_direct_classification(self, rng):
        mdp = random_mdp(6, 1, 0.8, rng)
        mu = np.zeros(6, dtype=int)
        V = np.column_stack([evaluate_policy(mdp, mu), mdp.expected_cost[:, 0]])
        b = [[float(np.median(V[:, 0]))], [float(np.median(V[:, 1]))]]
        part = partition_by_score_vector(V, breakpoints=b)
        keys = [(int(V[i, 0] >= b[0][0]), int(V[i, 1] >= b[1][0])) for i in range(6)]
        for i in range(6):
            for j in range(6):
                assert (part.feature[i] == part.feature[j]) == (keys[i] == keys[j])

    def test_locate_unseen(self):
        part = partition_by_score_vector(np.array([[0.0, 0.0], [1.0, 1.0]]), q=[2, 2])
        assert part.locate([1.0, 1.0]) == 1
        assert part.locate([0.0, 1.0]) is None


class TestBuiltinScores:
    def test_names(self, ts):
        np.testing.assert_allclose(builtin_score(ts, "j_mu", policy=[0, 0]), [4 / 3, 2 / 3])
        np.testing.assert_allclose(builtin_score(ts, "j_star"), [4 / 3, 2 / 3], atol=1e-10)
        np.testing.assert_allclose(builtin_score(ts, "bellman_residual"), [1.0, 0.0])
        with pytest.raises(ValidationError):
            builtin_score(ts, "j_mu")
        with pytest.raises(ValidationError):
            builtin_score(ts, "entropy")


def test_hard_aggregation_from_partition_is_valid(rng):
    V = rng.normal(size=12)
    part = partition_by_scores(V, q=4)
    again = build_hard_aggregation(part.cells, 12)
    np.testing.assert_array_equal(again.D, part.scheme.D)
