import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aggdp.aggregation import (
    build_hard_aggregation,
    evaluate_aggregate_policy,
    extract_policy,
    identity_scheme,
    lift_costs,
    random_partition,
    solve_aggregate_vi,
)
from aggdp.errors import SingularSystemError, ValidationError
from aggdp.mdp import evaluate_policy, from_transition_lists, random_mdp, solve_exact_vi
from aggdp.sim import (
    QFactorModel,
    async_stochastic_vi,
    hard_agg_qlearning,
    lstd0_evaluate,
    lstd_system,
    make_rng,
    parse_stepsize,
    qfactor_fit_and_extract,
    spawn_rngs,
)

pytestmark = pytest.mark.filterwarnings("ignore:hard-aggregation Q-learning")


def _self_loop(cost=1.0, alpha=0.5):
    return from_transition_lists([[[(1, 1.0, cost)]]], alpha)


class TestRng:
    def test_philox_reproducible(self):
        assert make_rng(7).random() == make_rng(7).random()
        assert make_rng(7, 0).random() != make_rng(7, 1).random()

    def test_streams_match_spawn(self):
        a = spawn_rngs(3, 4)[2].random(5)
        np.testing.assert_array_equal(a, make_rng(3, 2).random(5))

    @pytest.mark.parametrize("spec, expected", [("harmonic", None), (None, None), ("const:0.25", 0.25), (0.5, 0.5)])
    def test_stepsize_parse(self, spec, expected):
        assert parse_stepsize(spec) == expected

    @pytest.mark.parametrize("spec", ["fast", "const:0", 1.5])
    def test_stepsize_rejects(self, spec):
        with pytest.raises(ValidationError):
            parse_stepsize(spec)


class TestLstd:
    def test_two_state_single_cell(self, ts, single_cell):
        assert abs(lstd0_evaluate(ts, single_cell, [0, 0], 10**5, seed=1).r[0] - 1.0) <= 0.02

    def test_single_sample_self_loop(self):
        res = lstd0_evaluate(_self_loop(), identity_scheme(1), [0], 1)
        assert res.r[0] == 2.0

    def test_identity_deterministic_chain(self, rng):
        mdp = random_mdp(6, 1, 0.8, rng, branching=1)
        mu = np.zeros(6, dtype=int)
        res = lstd0_evaluate(mdp, identity_scheme(6), mu, 10**5, seed=2)
        assert np.max(np.abs(res.r - evaluate_policy(mdp, mu))) <= 0.05

    def test_deterministic_given_seed(self, ts, single_cell):
        a = lstd0_evaluate(ts, single_cell, [0, 0], 500, seed=9, streams=3)
        b = lstd0_evaluate(ts, single_cell, [0, 0], 500, seed=9, streams=3)
        np.testing.assert_array_equal(a.r, b.r)
        np.testing.assert_array_equal(a.C, b.C)

    def test_estimates_approach_exact_system(self, rng):
        mdp = random_mdp(8, 2, 0.9, rng)
        scheme = build_hard_aggregation(random_partition(8, 3, rng), 8)
        mu = np.zeros(8, dtype=int)
        C, b = lstd_system(mdp, scheme, mu)
        errs = []
        for M in (10**3, 10**4, 10**5):
            med = np.median(
                [np.max(np.abs(lstd0_evaluate(mdp, scheme, mu, M, seed=s).C - C)) for s in range(10)]
            )
            errs.append(med)
        assert errs[0] >= errs[1] >= errs[2]
        np.testing.assert_allclose(np.linalg.solve(C, b), evaluate_aggregate_policy(mdp, scheme, mu), atol=1e-10)

    def test_state_and_aggregate_sampling_agree(self, rng):
        mdp = random_mdp(8, 2, 0.9, rng)
        scheme = build_hard_aggregation(random_partition(8, 3, rng), 8)
        mu = np.zeros(8, dtype=int)
        exact = evaluate_aggregate_policy(mdp, scheme, mu)
        a = lstd0_evaluate(mdp, scheme, mu, 10**5, sampling="state", seed=4).r
        z = lstd0_evaluate(mdp, scheme, mu, 10**5, sampling="aggregate", seed=4).r
        scale = max(1.0, float(np.max(np.abs(exact))))
        assert np.max(np.abs(a - exact)) <= 0.05 * scale
        assert np.max(np.abs(z - exact)) <= 0.05 * scale

    def test_singular_raises(self):
        # SSP self-loop: a lone sample that stays put gives C_M = 1 - 1 = 0
        mdp = from_transition_lists([[[(1, 0.5, 1.0), (0, 0.5, 1.0)]]], None)
        with pytest.raises(SingularSystemError, match="larger"):
            lstd0_evaluate(mdp, identity_scheme(1), [0], 1, seed=0)
        assert lstd0_evaluate(mdp, identity_scheme(1), [0], 1, seed=2).r[0] == 1.0

    def test_zero_xi_on_support(self, ts, single_cell):
        with pytest.raises(ValidationError, match="state 2"):
            lstd0_evaluate(ts, single_cell, [0, 0], 10, xi=[1.0, 0.0])

    @pytest.mark.parametrize("kw", [{"M": 0}, {"M": 10, "sampling": "mixed"}, {"M": 2, "streams": 3}])
    def test_bad_arguments(self, ts, single_cell, kw):
        with pytest.raises(ValidationError):
            lstd0_evaluate(ts, single_cell, [0, 0], **kw)


class TestAsyncVI:
    def test_first_visit_unit_step(self):
        res = async_stochastic_vi(_self_loop(), identity_scheme(1), 1, stepsize="const:1", r0=[3.0])
        assert res.r[0] == 1.0 + 0.5 * 3.0
        assert res.visits.tolist() == [1]

    def test_two_state_single_cell(self, ts, single_cell):
        res = async_stochastic_vi(ts, single_cell, 10**5, seed=0)
        assert abs(res.r[0] - 1.0) <= 0.05

    @pytest.mark.parametrize("seed", range(10))
    def test_residual_decreases(self, seed):
        rng = np.random.default_rng(seed)
        mdp = random_mdp(10, 3, 0.9, rng)
        scheme = build_hard_aggregation(random_partition(10, 3, rng), 10)
        res = async_stochastic_vi(mdp, scheme, 20000, seed=seed)
        assert res.residual_final < res.residual_initial
        assert res.visits.min() > 0


class TestQLearning:
    def test_warns(self, ts, single_cell):
        with pytest.warns(UserWarning, match="same control"):
            hard_agg_qlearning(ts, single_cell, 10)

    def test_single_cell_single_control(self, ts, single_cell):
        res = hard_agg_qlearning(ts, single_cell, 50000, seed=1, warn=False)
        assert abs(res.Q[0, 0] - 1.0) <= 0.05

    def test_unit_step_is_gauss_seidel_sweep(self, rng):
        mdp = random_mdp(6, 2, 0.9, rng, branching=1, fixed_controls=True)
        scheme = build_hard_aggregation(random_partition(6, 2, rng), 6)
        steps = 4
        res = hard_agg_qlearning(mdp, scheme, steps, stepsize="const:1", seed=3, warn=False)
        cell = scheme.cell_of()
        Q = np.zeros((2, 2))
        for l, u, i, j in res.order:
            Q[l, u] = mdp.expected_cost[i, u] + mdp.alpha * Q[cell[j]].min()
        np.testing.assert_allclose(res.Q, Q, atol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_cell_policy_no_better_than_optimal(self, seed):
        rng = np.random.default_rng(seed)
        mdp = random_mdp(6, 2, 0.8, rng, fixed_controls=True)
        scheme = build_hard_aggregation(random_partition(6, 2, rng), 6)
        res = hard_agg_qlearning(mdp, scheme, 5000, seed=seed, warn=False)
        J = solve_exact_vi(mdp, 1e-12).J
        assert np.all(evaluate_policy(mdp, res.policy) >= J - 1e-9)

    def test_heterogeneous_controls(self):
        mdp = from_transition_lists([[[(1, 1.0, 0.0)], [(2, 1.0, 1.0)]], [[(1, 1.0, 0.0)]]], 0.5)
        with pytest.raises(ValidationError, match="cell 1"):
            hard_agg_qlearning(mdp, build_hard_aggregation([[0, 1]], 2), 10, warn=False)


class TestQFactorFit:
    @pytest.mark.parametrize("seed", range(5))
    def test_tabular_exhaustive_matches_extract(self, seed):
        rng = np.random.default_rng(seed)
        mdp = random_mdp(8, 3, 0.9, rng)
        scheme = build_hard_aggregation(random_partition(8, 3, rng), 8)
        r = solve_aggregate_vi(mdp, scheme, 1e-12).r
        fit = qfactor_fit_and_extract(mdp, lift_costs(scheme, r))
        np.testing.assert_array_equal(fit.policy, extract_policy(mdp, scheme, r))
        assert not fit.regularized

    def test_self_loop_noisy_samples(self, ts_loop, single_cell):
        r = solve_aggregate_vi(ts_loop, single_cell, 1e-12).r
        fit = qfactor_fit_and_extract(ts_loop, lift_costs(single_cell, r), M=10**4, seed=5, noise=0.1)
        assert fit.policy.tolist() == [1, 0]

    def test_rank_deficient_regularized(self, ts):
        model = QFactorModel(np.ones((2, 1, 2)))
        fit = qfactor_fit_and_extract(ts, np.zeros(2), model=model)
        assert fit.regularized

    def test_shape_checks(self, ts):
        with pytest.raises(ValidationError):
            qfactor_fit_and_extract(ts, np.zeros(3))
        with pytest.raises(ValidationError):
            qfactor_fit_and_extract(ts, np.zeros(2), model=QFactorModel(np.ones((3, 1, 1))))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6), M=st.integers(1, 200))
def test_lstd_seed_determinism(seed, M):
    mdp = random_mdp(4, 2, 0.7, np.random.default_rng(seed))
    scheme = build_hard_aggregation([[0, 1], [2, 3]], 4)
    mu = np.zeros(4, dtype=int)
    try:
        a = lstd0_evaluate(mdp, scheme, mu, M, seed=seed).C
    except SingularSystemError:
        return
    np.testing.assert_array_equal(a, lstd0_evaluate(mdp, scheme, mu, M, seed=seed).C)
