import itertools
import math
from fractions import Fraction

import numpy as np
import pytest

from brql.mdp import (ConvergenceError, MdpModel, coin_toss_env, coin_toss_reward, dump_kernel, dump_q,
                      exact_bellman, greedy_policy, inventory_env, inventory_next_state, inventory_reward,
                      load_q, poisson_binomial_pmf, policy_evaluation_exact, state_dependent_poisson,
                      state_values, truncated_poisson_pmf, value_iteration)

from conftest import all_policies, random_mdp

COSTS = dict(order_cost=1, profit=5, penalty=2, holding=1)


def one_state(r=1.0, gamma=0.9):
    return MdpModel(np.full((1, 1, 1), r), np.ones((1, 1, 1)), gamma)


def two_state_example():
    # p=(0.5,0.5), r(s,a,.)=(1,3) for the pair (0,0)
    reward = np.array([[[1.0, 3.0]], [[0.0, 0.0]]])
    trans = np.array([[[0.5, 0.5]], [[1.0, 0.0]]])
    return MdpModel(reward, trans, 0.9)


class TestModel:
    def test_rejects_bad_rows(self):
        with pytest.raises(ValueError):
            MdpModel(np.zeros((1, 1, 2)), np.array([[[0.5, 0.6]]]), 0.9)

    def test_rejects_bad_discount(self):
        with pytest.raises(ValueError):
            MdpModel(np.zeros((1, 1, 1)), np.ones((1, 1, 1)), 1.0)

    def test_reward_bound_over_admissible_only(self):
        m = inventory_env(3)
        adm = m.admissible
        assert m.reward_bound == np.abs(m.reward[adm]).max()

    def test_arrays_are_read_only(self, small_mdp):
        with pytest.raises(ValueError):
            small_mdp.transitions[0, 0, 0] = 1.0


class TestGreedy:
    @pytest.mark.parametrize("row, expected", [((0, 5), 1), ((1, 1), 0), ((-2, -3), 0)])
    def test_examples(self, row, expected):
        assert greedy_policy(np.array([row], float))[0] == expected

    def test_respects_admissibility(self):
        m = inventory_env(2)
        q = np.zeros((m.num_states, m.num_actions))
        q[~m.admissible] = 100.0
        pol = greedy_policy(q, m)
        assert m.admissible[np.arange(m.num_states), pol].all()


class TestBellman:
    def test_single_term(self):
        assert exact_bellman(one_state(), np.zeros((1, 1)))[0, 0] == 1.0

    def test_substitution_example(self):
        m = two_state_example()
        q = np.array([[0.0], [2.0]])
        assert exact_bellman(m, q)[0, 0] == pytest.approx(2.9, abs=1e-14)

    def test_fixed_point(self, small_mdp):
        q = value_iteration(small_mdp, tol=1e-10)
        assert np.abs(exact_bellman(small_mdp, q) - q).max() <= 1e-10


class TestValueIteration:
    def test_geometric_series(self):
        q = value_iteration(one_state(2.0, 0.9), tol=1e-10)
        assert q[0, 0] == pytest.approx(20.0, abs=1e-9)

    def test_translation(self, small_mdp):
        c = 3.7
        shifted = MdpModel(small_mdp.reward + c, small_mdp.transitions, small_mdp.discount)
        q0 = value_iteration(small_mdp, tol=1e-11)
        q1 = value_iteration(shifted, tol=1e-11)
        assert np.abs(q1 - q0 - c / (1 - small_mdp.discount)).max() <= 1e-8

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_policy_enumeration(self, seed):
        m = random_mdp(np.random.default_rng(seed), S=2, A=2)
        best = max((policy_evaluation_exact(m, p) for p in all_policies(m)), key=lambda v: v.sum())
        enum_best = np.max([policy_evaluation_exact(m, p) for p in all_policies(m)], axis=0)
        assert np.allclose(best, enum_best, atol=1e-12)
        v = state_values(m, value_iteration(m, tol=1e-12))
        assert np.abs(v - enum_best).max() <= 1e-9

    def test_inventory_matches_enumeration_small(self):
        m = inventory_env(1, **COSTS)
        enum_best = np.max([policy_evaluation_exact(m, p) for p in all_policies(m)], axis=0)
        assert np.abs(state_values(m, value_iteration(m, tol=1e-12)) - enum_best).max() <= 1e-9

    def test_iteration_cap(self, small_mdp):
        with pytest.raises(ConvergenceError):
            value_iteration(small_mdp, tol=1e-12, max_sweeps=3)

    def test_rejects_bad_tol(self, small_mdp):
        with pytest.raises(ValueError):
            value_iteration(small_mdp, tol=0.0)


class TestPolicyEvaluation:
    def test_single_state(self):
        assert policy_evaluation_exact(one_state(1.5, 0.8), [0])[0] == pytest.approx(7.5)

    def test_greedy_optimal(self, small_mdp):
        q = value_iteration(small_mdp, tol=1e-12)
        v = policy_evaluation_exact(small_mdp, greedy_policy(q, small_mdp))
        assert np.abs(v - state_values(small_mdp, q)).max() <= 1e-8

    def test_constant_reward(self, rng):
        S, A = 4, 3
        m = MdpModel(np.ones((S, A, S)), rng.dirichlet(np.ones(S), (S, A)), 0.95)
        for pol in ([0, 1, 2, 0], [2, 2, 2, 2]):
            assert np.allclose(policy_evaluation_exact(m, pol), 20.0, atol=1e-10)

    def test_rejects_inadmissible(self):
        m = inventory_env(2)
        with pytest.raises(ValueError):
            policy_evaluation_exact(m, [2] * m.num_states)


class TestCoinToss:
    def test_rewards(self):
        assert coin_toss_reward(3, 1, 5) == 1
        assert coin_toss_reward(3, -1, 5) == -1
        assert coin_toss_reward(3, 0, 5) == 0
        assert coin_toss_reward(4, 1, 4) == -1

    def test_reward_table_matches_formula(self):
        m = coin_toss_env(4)
        for s, ai, sn in itertools.product(range(5), range(3), range(5)):
            assert m.reward[s, ai, sn] == coin_toss_reward(s, int(m.action_labels[ai]), sn)

    def test_fair_two_coins(self):
        m = coin_toss_env(2, [0.5, 0.5])
        assert np.allclose(m.transitions[0, 0], [0.25, 0.5, 0.25], atol=1e-15)

    def test_rejects_bad_probability(self):
        with pytest.raises(ValueError):
            coin_toss_env(2, [0.5, 1.0])

    @pytest.mark.parametrize("K", [1, 4, 9, 12])
    def test_poisson_binomial_brute_force(self, K):
        probs = np.random.default_rng(K).uniform(0.05, 0.95, K)
        brute = np.zeros(K + 1)
        for outcome in itertools.product((0, 1), repeat=K):
            o = np.array(outcome)
            brute[o.sum()] += np.prod(np.where(o == 1, probs, 1 - probs))
        pmf = poisson_binomial_pmf(probs)
        assert abs(pmf.sum() - 1) <= 1e-12
        assert np.abs(pmf - brute).max() <= 1e-12

    def test_rows_ignore_state_and_action(self):
        m = coin_toss_env(10, np.linspace(0.4, 0.9, 10))
        assert np.abs(m.transitions - m.transitions[0, 0]).max() == 0.0


class TestInventory:
    def test_reward_examples(self):
        assert inventory_next_state(2, 3, 4, 10) == 1
        assert inventory_reward(2, 3, 1, **COSTS) == 16
        assert inventory_next_state(2, 3, 6, 10) == -1
        assert inventory_reward(2, 3, -1, **COSTS) == 20

    def test_no_order_no_sales(self):
        for s in range(0, 5):
            assert inventory_reward(s, 0, s, **COSTS) == -s

    def test_rejects_overfull_order(self):
        with pytest.raises(ValueError):
            inventory_next_state(4, 7, 0, 10)

    def test_admissible_sets(self):
        m = inventory_env(10)
        levels = m.state_labels
        for i, s in enumerate(levels):
            assert list(np.flatnonzero(m.admissible[i])) == list(range(10 - max(s, 0) + 1))

    @pytest.mark.parametrize("demand", [None, state_dependent_poisson(10),
                                        lambda s: truncated_poisson_pmf(3.0, 10)])
    def test_rows_sum_to_one(self, demand):
        m = inventory_env(10, demand_pmf=demand)
        assert np.abs(m.transitions.sum(axis=2) - 1).max() <= 1e-12

    def test_transition_construction_by_simulation_rule(self):
        K = 4
        pmf = truncated_poisson_pmf(2.0, K)
        m = inventory_env(K, demand_pmf=lambda s: pmf)
        for i, s in enumerate(m.state_labels):
            for a in np.flatnonzero(m.admissible[i]):
                expect = np.zeros(2 * K + 1)
                for d in range(K + 1):
                    expect[inventory_next_state(int(s), int(a), d, K) + K] += pmf[d]
                assert np.allclose(m.transitions[i, a], expect, atol=1e-15)


class TestTruncatedPoisson:
    def test_large_support_limit(self):
        pmf = truncated_poisson_pmf(3.0, 60)
        exact = np.array([math.exp(-3) * 3 ** d / math.factorial(d) for d in range(61)])
        assert np.abs(pmf - exact).max() <= 1e-15

    def test_single_point(self):
        assert np.array_equal(truncated_poisson_pmf(3.0, 0), [1.0])

    def test_exact_proportions(self):
        weights = [Fraction(3) ** d / math.factorial(d) for d in range(11)]
        total = sum(weights)
        exact = [float(w / total) for w in weights]
        pmf = truncated_poisson_pmf(3.0, 10)
        assert np.abs(pmf - exact).max() <= 1e-15
        assert abs(pmf.sum() - 1.0) <= 1e-15


class TestDumps:
    def test_q_round_trip(self, small_mdp, rng):
        q = rng.normal(size=(3, 2))
        assert np.array_equal(load_q(dump_q(small_mdp, q), q.shape), q)

    def test_kernel_dump_lines(self):
        m = inventory_env(2)
        lines = dump_kernel(m).splitlines()
        assert len(lines) == m.admissible.sum()
        first = lines[0].split()
        assert len(first) == 2 + 2 * m.num_states
