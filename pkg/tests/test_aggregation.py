import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aggdp.aggregation import (
    AggregationScheme,
    aggregate_operator_H,
    aggregate_policy_matrices,
    aggregation_policy_iteration,
    build_hard_aggregation,
    build_representative_states,
    check_error_bound,
    evaluate_aggregate_policy,
    extract_policy,
    identity_scheme,
    lift_costs,
    random_partition,
    scheme_from_json_dict,
    scheme_to_json_dict,
    solve_aggregate_vi,
)
from aggdp.errors import ImproperPolicyError, ValidationError
from aggdp.mdp import bellman_optimal, from_transition_lists, policy_iteration, random_mdp, solve_exact_vi
from aggdp.ssp import chain_fixture


def _plain_fixed_point(mdp, scheme, iters):
    """Per-state loops over controls, no vectorization."""
    r = np.zeros(scheme.q)
    for _ in range(iters):
        J = scheme.Phi @ r
        best = [min(mdp.expected_cost[i, u] + mdp.alpha * mdp.P[i, u] @ J for u in mdp.controls(i)) for i in range(mdp.n)]
        r = scheme.D @ np.array(best)
    return r


class TestSchemeConstruction:
    def test_single_cell_matrices(self, single_cell):
        np.testing.assert_allclose(single_cell.D, [[0.5, 0.5]])
        np.testing.assert_allclose(single_cell.Phi, [[1.0], [1.0]])

    def test_d_phi_identity(self):
        s = build_hard_aggregation([[0], [1, 2]], 3)
        np.testing.assert_allclose(s.D @ s.Phi, np.eye(2), atol=1e-12)

    def test_singleton_partition_is_identity(self):
        s = identity_scheme(4)
        np.testing.assert_array_equal(s.D, np.eye(4))
        np.testing.assert_array_equal(s.Phi, np.eye(4))

    @pytest.mark.parametrize(
        "cells, match",
        [([[0, 1], [1, 2]], "exactly once"), ([[0], [], [1, 2]], "empty"), ([[0], [2]], "exactly once")],
    )
    def test_bad_partitions(self, cells, match):
        with pytest.raises(ValidationError, match=match):
            build_hard_aggregation(cells, 3)

    def test_disaggregation_mass_outside_set(self):
        D = np.array([[0.5, 0.5, 0.0], [0.0, 0.0, 1.0]])
        Phi = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(ValidationError):
            AggregationScheme(D, Phi, [[0], [2]])

    def test_non_distribution_interp(self):
        with pytest.raises(ValidationError):
            build_representative_states([0, 2], 3, interp=[[1, 0], [0.6, 0.6], [0, 1]])

    def test_representative_fixed_point(self, ts):
        s = build_representative_states([0], 2)
        assert s.Phi[1, 0] == 1.0
        np.testing.assert_allclose(solve_aggregate_vi(ts, s, 1e-12).r, [2.0], atol=1e-10)

    def test_all_representatives_is_identity(self):
        s = build_representative_states([0, 1, 2], 3)
        np.testing.assert_array_equal(s.Phi, np.eye(3))

    def test_chain_interpolation_rows(self):
        s = build_representative_states([0, 4], 5)
        np.testing.assert_allclose(s.Phi.sum(axis=1), 1.0)
        np.testing.assert_allclose(s.Phi[2], [0.5, 0.5])

    def test_json_round_trip(self):
        s = build_representative_states([0, 4], 5)
        back = scheme_from_json_dict(scheme_to_json_dict(s), 5)
        np.testing.assert_array_equal(back.D, s.D)
        np.testing.assert_array_equal(back.Phi, s.Phi)

    def test_json_defaults_to_hard(self):
        s = scheme_from_json_dict({"disagg_sets": [[1, 3], [2]]}, 3)
        assert s.is_hard()
        assert s.cell_of().tolist() == [0, 1, 0]


class TestOperator:
    @pytest.mark.parametrize("r, expected", [(0.0, 0.5), (1.0, 1.0)])
    def test_two_state_single_cell(self, ts, single_cell, r, expected):
        np.testing.assert_allclose(aggregate_operator_H(ts, single_cell, [r]), [expected])

    def test_identity_scheme_is_T(self, rng):
        mdp = random_mdp(7, 3, 0.9, rng)
        r = rng.normal(size=7)
        np.testing.assert_allclose(aggregate_operator_H(mdp, identity_scheme(7), r), bellman_optimal(mdp, r))

    def test_dimension_mismatch(self, ts, single_cell):
        with pytest.raises(ValidationError):
            aggregate_operator_H(ts, single_cell, [0.0, 1.0])
        with pytest.raises(ValidationError):
            aggregate_operator_H(ts, identity_scheme(3), [0.0, 1.0, 2.0])

    def test_lift(self, single_cell):
        np.testing.assert_allclose(lift_costs(single_cell, [1.0]), [1.0, 1.0])


class TestSolvers:
    def test_two_state_r_star(self, ts, single_cell):
        np.testing.assert_allclose(solve_aggregate_vi(ts, single_cell, 1e-12).r, [1.0], atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_identity_scheme_matches_vi(self, seed):
        mdp = random_mdp(8, 3, 0.9, np.random.default_rng(seed))
        r = solve_aggregate_vi(mdp, identity_scheme(8), 1e-12).r
        np.testing.assert_allclose(r, solve_exact_vi(mdp, 1e-12).J, atol=1e-9)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_plain_iteration(self, seed):
        rng = np.random.default_rng(seed)
        mdp = random_mdp(8, 2, 0.6, rng)
        scheme = build_hard_aggregation(random_partition(8, 3, rng), 8)
        np.testing.assert_allclose(
            solve_aggregate_vi(mdp, scheme, 1e-13).r, _plain_fixed_point(mdp, scheme, 200), atol=1e-10
        )

    def test_extract_self_loop(self, ts_loop, single_cell):
        r = solve_aggregate_vi(ts_loop, single_cell, 1e-12).r
        assert extract_policy(ts_loop, single_cell, r).tolist() == [1, 0]

    def test_extract_identity_optimal(self, rng):
        mdp = random_mdp(6, 3, 0.9, rng)
        J = solve_exact_vi(mdp, 1e-12).J
        mu = extract_policy(mdp, identity_scheme(6), J)
        np.testing.assert_allclose(mu, policy_iteration(mdp).policy)

    def test_pi_single_policy(self, ts, single_cell):
        res = aggregation_policy_iteration(ts, single_cell)
        assert res.iterations == 1
        np.testing.assert_allclose(res.r, [1.0])

    def test_pi_identity_replicates_exact(self, rng):
        mdp = random_mdp(6, 3, 0.9, rng)
        res = aggregation_policy_iteration(mdp, identity_scheme(6))
        np.testing.assert_allclose(res.r, policy_iteration(mdp).J, atol=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_pi_matches_vi(self, seed):
        rng = np.random.default_rng(seed)
        mdp = random_mdp(6, 2, 0.9, rng, fixed_controls=True)
        scheme = build_hard_aggregation(random_partition(6, 2, rng), 6)
        res = aggregation_policy_iteration(mdp, scheme)
        np.testing.assert_allclose(res.r, solve_aggregate_vi(mdp, scheme, 1e-12).r, atol=1e-9)

    def test_pi_names_improper_policy(self):
        mdp = from_transition_lists([[[(1, 1.0, 0.0)], [(0, 1.0, 1.0)]]], None)
        with pytest.raises(ImproperPolicyError, match=r"\(1\)") as info:
            aggregation_policy_iteration(mdp, identity_scheme(1), [0])
        assert info.value.policy.tolist() == [0]


class TestErrorBound:
    def test_two_state_values(self, ts, single_cell):
        rep = check_error_bound(ts, single_cell, [1.0], [4 / 3, 2 / 3])
        assert rep.epsilon == pytest.approx(2 / 3)
        assert rep.bound == pytest.approx(4 / 3)
        assert rep.max_gap == pytest.approx(1 / 3)
        assert rep.ok

    def test_violation_reported(self, ts, single_cell):
        rep = check_error_bound(ts, single_cell, [5.0], [4 / 3, 2 / 3])
        assert not rep.ok
        assert {v[0] for v in rep.violations} == {0, 1}

    def test_zero_epsilon_exact(self):
        # two disconnected copies of a self-loop with equal cost
        mdp = from_transition_lists([[[(1, 1.0, 1.0)]], [[(2, 1.0, 1.0)]]], 0.5)
        s = build_hard_aggregation([[0, 1]], 2)
        J = solve_exact_vi(mdp, 1e-12).J
        r = solve_aggregate_vi(mdp, s, 1e-12).r
        rep = check_error_bound(mdp, s, r, J)
        assert rep.epsilon == 0.0
        np.testing.assert_allclose(r, [2.0], atol=1e-10)

    def test_general_zero_one_phi(self, rng):
        # representative states with nearest-neighbour aggregation rows
        mdp = random_mdp(6, 2, 0.8, rng)
        Phi = np.zeros((6, 2))
        Phi[:3, 0] = Phi[3:, 1] = 1.0
        s = build_representative_states([1, 4], 6, interp=Phi)
        r = solve_aggregate_vi(mdp, s, 1e-12).r
        assert check_error_bound(mdp, s, r, solve_exact_vi(mdp, 1e-12).J).ok

    def test_rejects_ssp(self):
        chain = chain_fixture(3, "a")
        with pytest.raises(ValidationError):
            check_error_bound(chain.mdp, identity_scheme(3), np.ones(3), np.ones(3))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), q=st.integers(1, 5))
def test_policy_chain_is_stochastic(seed, q):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(8, 3, 0.9, rng)
    scheme = build_hard_aggregation(random_partition(8, q, rng), 8)
    mu = [int(rng.integers(k)) for k in mdp.n_controls]
    P_mu, _ = mdp.policy_matrices(mu)
    M = scheme.Phi @ scheme.D @ P_mu
    assert np.all(M >= 0)
    np.testing.assert_allclose(M.sum(axis=1), 1.0, atol=1e-12)
    P_hat, _ = aggregate_policy_matrices(mdp, scheme, mu)
    np.testing.assert_allclose(P_hat.sum(axis=1), 1.0, atol=1e-12)
    r = evaluate_aggregate_policy(mdp, scheme, mu)
    np.testing.assert_allclose(aggregate_operator_H(mdp, scheme, r, mu), r, atol=1e-9)
