import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treepi.core import RngStream
from treepi.envs import ChainSpec, TabularPolicy, chain_exact_env
from treepi.nets import GaussianPolicyNet
from treepi.oracle import full_tree_estimate, make_random_chain
from treepi.search import (TAG_FINAL_DRAW, BoundGaussianPolicy, ChainModel,
                           act_search, pg_gradient, pg_refine,
                           pi_rollout_weights, resample_action, resample_probs,
                           smc_sample, soft_backup, treepi_search)


class TestSoftBackup:
    def test_constant_table(self):
        assert soft_backup(np.full(7, 2.5), 0.3) == pytest.approx(2.5, abs=1e-12)

    def test_single_entry(self):
        assert soft_backup(np.array([1.7]), 0.9) == pytest.approx(1.7, abs=1e-12)

    def test_reference_value(self):
        v = soft_backup(np.array([1.0, 0.0]), 0.5)
        assert v == pytest.approx(0.5 * math.log((math.exp(2.0) + 1.0) / 2.0), abs=1e-12)
        assert v == pytest.approx(0.7168904, abs=1e-6)

    def test_alpha_to_zero_approaches_max(self):
        q = np.array([0.3, -1.0, 0.9, 0.2])
        alpha = 1e-6
        assert abs(soft_backup(q, alpha) - q.max()) <= alpha * math.log(len(q))

    def test_large_values_stable(self):
        q = np.array([1000.0, 999.0])
        v = soft_backup(q, 1.0)
        assert np.isfinite(v) and 999.0 < v < 1000.0

    def test_alpha_validated(self):
        with pytest.raises(ValueError):
            soft_backup(np.array([1.0]), 0.0)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            soft_backup(np.array([np.nan, 1.0]), 1.0)

    @given(st.integers(0, 4), st.floats(-3, 3), st.floats(0.05, 2.0))
    @settings(max_examples=100, deadline=None)
    def test_monotone_in_each_entry(self, idx, base, alpha):
        q = np.linspace(-1.0, 1.0, 5) + base
        bumped = q.copy()
        bumped[idx] += 0.1
        assert soft_backup(bumped, alpha) >= soft_backup(q, alpha)

    def test_long_table_matches_numpy_path(self):
        # >16 entries exercises the vector branch; both paths agree closely
        rng = RngStream(0)
        q = np.asarray(rng.normal(40))
        direct = 1.0 * (np.log(np.mean(np.exp(q))))
        assert soft_backup(q, 1.0) == pytest.approx(direct, abs=1e-12)


class TestResample:
    def test_symmetric(self):
        p = resample_probs(np.array([1.0, 1.0, 1.0]), 0.7)
        assert np.allclose(p, 1.0 / 3.0, atol=1e-15)
        assert p.sum() == pytest.approx(1.0, abs=1e-12)

    def test_low_temperature_argmax(self):
        p = resample_probs(np.array([1.0, 0.0]), 0.01)
        assert p[0] >= 1.0 - 1e-40
        assert p[1] <= 1e-40  # exp(-100) mass on the loser

    def test_reference_probabilities(self):
        p = resample_probs(np.array([2.0, 0.0, -1.0]), 1.0)
        z = math.exp(2.0) + 1.0 + math.exp(-1.0)
        assert np.allclose(p, [math.exp(2.0) / z, 1.0 / z, math.exp(-1.0) / z], atol=1e-12)
        assert np.allclose(p, [0.843794, 0.114195, 0.042011], atol=1e-6)

    def test_draw_respects_probs(self):
        rng = RngStream(1)
        actions = ["x", "y"]
        counts = {"x": 0, "y": 0}
        n = 20_000
        for _ in range(n):
            _, a = resample_action(actions, np.array([1.0, 0.0]), 1.0, rng)
            counts[a] += 1
        p_x = math.exp(1.0) / (math.exp(1.0) + 1.0)
        se = math.sqrt(p_x * (1 - p_x) / n)
        assert abs(counts["x"] / n - p_x) < 4 * se


def counting_model(env):
    model = ChainModel(env)
    calls = {"step": 0}
    orig = model.step

    def step(mstate, atom):
        calls["step"] += 1
        return orig(mstate, atom)

    model.step = step
    return model, calls


class TestTreePiSearch:
    def test_k1_weights_are_one_step_improvement(self):
        rng = RngStream(2)
        for i in range(20):
            chain = make_random_chain(2, 3, rng.child(i))
            env, policy = chain_exact_env(chain)
            model = ChainModel(env)
            res = treepi_search(chain.root, policy, model, M=3, K=1, N=7,
                                alpha=0.6, gamma=0.95, mode="exhaustive",
                                rng=rng.child(100 + i))
            leaf = model.leaf_q_many(model.root(chain.root), res.actions)
            assert np.array_equal(res.weights, resample_probs(leaf, 0.6))

    def test_m1_degenerate_weight(self):
        chain = make_random_chain(2, 2, RngStream(3))
        env, policy = chain_exact_env(chain)

        class OneAtomPolicy:
            def sample_n(self, state, n, rng):
                return policy.sample_n(state, n, rng)[:1] * n

        res = treepi_search(chain.root, TabularPolicy(
            {s: {a[0]: 1.0} for s, a in chain.atoms.items() if a}),
            ChainModel(env), M=1, K=2, N=5, alpha=1.0, gamma=1.0, rng=RngStream(4))
        assert np.array_equal(res.weights, np.array([1.0]))

    def test_exhaustive_equals_full_tree_bitwise(self):
        rng = RngStream(5)
        chain = make_random_chain(2, 2, rng.child(0))
        env, policy = chain_exact_env(chain)
        model = ChainModel(env)
        shared = rng.child(1)
        res = treepi_search(chain.root, policy, model, M=2, K=2, N=4, alpha=1.0,
                            gamma=1.0, mode="exhaustive", rng=shared)
        ft = full_tree_estimate(chain.root, policy, model, M=2, K=2, alpha=1.0,
                                gamma=1.0, rng=shared)
        assert np.array_equal(res.root_q, ft.q)
        assert res.actions == ft.actions

    def test_structural_invariants_random_runs(self):
        rng = RngStream(6)
        for i in range(10):
            chain = make_random_chain(3, 2, rng.child(i))
            env, policy = chain_exact_env(chain)
            res = treepi_search(chain.root, policy, ChainModel(env), M=2, K=3,
                                N=20, alpha=0.5, gamma=0.9,
                                rng=rng.child(100 + i), check_invariants=True)
            assert abs(res.weights.sum() - 1.0) < 1e-12
            assert np.all(res.weights >= 0)
            assert res.max_depth <= 2

    def test_each_edge_stepped_exactly_once(self):
        rng = RngStream(7)
        chain = make_random_chain(3, 2, rng.child(0))
        env, policy = chain_exact_env(chain)
        model, calls = counting_model(env)
        res = treepi_search(chain.root, policy, model, M=2, K=3, N=40,
                            alpha=0.8, gamma=0.9, rng=rng.child(1))
        # every created non-root node corresponds to exactly one model step
        assert calls["step"] == res.nodes - 1

    def test_standard_mode_uses_full_budget(self):
        chain = make_random_chain(2, 2, RngStream(8))
        env, policy = chain_exact_env(chain)
        res = treepi_search(chain.root, policy, ChainModel(env), M=2, K=2,
                            N=17, alpha=1.0, gamma=1.0, rng=RngStream(9))
        assert res.rollouts_used == 17

    def test_exhaustive_stops_at_complete_tree(self):
        chain = make_random_chain(2, 2, RngStream(10))
        env, policy = chain_exact_env(chain)
        res = treepi_search(chain.root, policy, ChainModel(env), M=2, K=2,
                            N=100, alpha=1.0, gamma=1.0, mode="exhaustive",
                            rng=RngStream(11))
        # complete binary K=2 tree: root + 2 children
        assert res.nodes == 3
        assert res.rollouts_used <= 4

    def test_same_seed_same_result(self):
        chain = make_random_chain(3, 2, RngStream(12))
        env, policy = chain_exact_env(chain)

        def run():
            return treepi_search(chain.root, policy, ChainModel(env), M=2, K=3,
                                 N=12, alpha=0.5, gamma=0.95, rng=RngStream(13))

        a, b = run(), run()
        assert np.array_equal(a.root_q, b.root_q)
        assert a.actions == b.actions

    def test_rejects_bad_mode(self):
        chain = make_random_chain(1, 2, RngStream(14))
        env, policy = chain_exact_env(chain)
        with pytest.raises(ValueError):
            treepi_search(chain.root, policy, ChainModel(env), M=2, K=1, N=1,
                          alpha=1.0, gamma=1.0, mode="greedy", rng=RngStream(0))


class TestActSearch:
    def _uniform_fixture(self):
        spec = ChainSpec(root="s", horizon=2)
        for i in range(4):
            spec.add("s", f"a{i}", 0.0, f"c{i}", 0.0)  # equal leaf Q
        return spec.validate()

    def test_uniform_weights_uniform_draws(self):
        chain = self._uniform_fixture()
        env, policy = chain_exact_env(chain, enumerate_support=True)
        model = ChainModel(env)
        rng = RngStream(15)
        counts = {f"a{i}": 0 for i in range(4)}
        n = 10_000
        for i in range(n):
            a = act_search(chain.root, policy, model, M=4, K=1, N=1, alpha=1.0,
                           gamma=1.0, rng=rng.child(i))
            counts[a] += 1
        expected = n / 4
        stat = sum((c - expected) ** 2 / expected for c in counts.values())
        dof = 3
        assert stat < dof + 5 * math.sqrt(2 * dof)

    def test_degenerate_weights_return_argmax(self):
        spec = ChainSpec(root="s", horizon=2)
        spec.add("s", "good", 0.0, "c0", 100.0)
        spec.add("s", "bad", 0.0, "c1", 0.0)
        chain = spec.validate()
        env, policy = chain_exact_env(chain, enumerate_support=True)
        for i in range(20):
            a = act_search(chain.root, policy, ChainModel(env), M=2, K=1, N=1,
                           alpha=0.1, gamma=1.0, rng=RngStream(16).child(i))
            assert a == "good"

    def test_same_seed_same_action(self):
        chain = make_random_chain(2, 3, RngStream(17))
        env, policy = chain_exact_env(chain)
        model = ChainModel(env)
        a1 = act_search(chain.root, policy, model, M=3, K=2, N=8, alpha=0.5,
                        gamma=0.9, rng=RngStream(18))
        a2 = act_search(chain.root, policy, model, M=3, K=2, N=8, alpha=0.5,
                        gamma=0.9, rng=RngStream(18))
        assert a1 == a2


class TestPiRolloutWeights:
    def test_identical_returns_uniform(self):
        spec = ChainSpec(root="s", horizon=3)
        for i in range(3):
            spec.add("s", f"a{i}", 0.5, "m", 0.0)
        spec.add("m", "b", 0.25, "e", 0.125)
        chain = spec.validate()
        env, policy = chain_exact_env(chain)
        res = pi_rollout_weights(chain.root, policy, ChainModel(env), M=3, K=2,
                                 alpha=1.0, gamma=0.9, rng=RngStream(19))
        assert np.allclose(res.weights, 1.0 / 3.0, atol=1e-12)

    def test_k1_equals_treepi_k1_on_enumerated_support(self):
        chain = make_random_chain(1, 3, RngStream(20))
        env, policy = chain_exact_env(chain, enumerate_support=True)
        model = ChainModel(env)
        pr = pi_rollout_weights(chain.root, policy, model, M=3, K=1, alpha=0.7,
                                gamma=0.9, rng=RngStream(21))
        ts = treepi_search(chain.root, policy, model, M=3, K=1, N=1, alpha=0.7,
                           gamma=0.9, rng=RngStream(22))
        assert list(pr.actions) == list(ts.actions)
        assert np.allclose(pr.weights, ts.weights, atol=1e-15)

    def test_two_atom_reference_weights(self):
        spec = ChainSpec(root="s", horizon=3)
        spec.add("s", "hi", 1.0, "c0", 0.0)
        spec.add("s", "lo", 0.0, "c1", 0.0)
        spec.add("c0", "z", 0.0, "e0", 0.0)
        spec.add("c1", "z", 0.0, "e1", 0.0)
        chain = spec.validate()
        env, policy = chain_exact_env(chain, enumerate_support=True)
        res = pi_rollout_weights(chain.root, policy, ChainModel(env), M=2, K=2,
                                 alpha=1.0, gamma=1.0, rng=RngStream(23))
        # returns {1, 0} (leaf Q is zero): weights e/(e+1), 1/(e+1)
        e = math.e
        assert np.allclose(res.weights, [e / (e + 1), 1 / (e + 1)], atol=1e-12)
        assert np.allclose(res.weights, [0.731059, 0.268941], atol=1e-6)


class TestSmcSample:
    def test_single_particle_returns_its_first_action(self):
        chain = make_random_chain(3, 2, RngStream(24))
        env, policy = chain_exact_env(chain)
        model = ChainModel(env)
        a = smc_sample(chain.root, policy, model, particles=1, K=3, alpha=1.0,
                       gamma=0.9, rng=RngStream(25))
        assert a in chain.atoms[chain.root]

    def test_identical_rewards_matches_policy_marginal(self):
        # constant rewards and leaf Q: reweighting is a no-op, so first-action
        # frequencies match the (uniform) policy
        spec = ChainSpec(root="s", horizon=3)
        for i in range(3):
            spec.add("s", f"a{i}", 0.5, "m", 0.25)
        spec.add("m", "b", 0.5, "e", 0.25)
        chain = spec.validate()
        env, policy = chain_exact_env(chain)
        model = ChainModel(env)
        rng = RngStream(26)
        counts = {f"a{i}": 0 for i in range(3)}
        n = 6_000
        for i in range(n):
            counts[smc_sample(chain.root, policy, model, particles=4, K=2,
                              alpha=1.0, gamma=0.9, rng=rng.child(i))] += 1
        expected = n / 3
        stat = sum((c - expected) ** 2 / expected for c in counts.values())
        assert stat < 2 + 5 * math.sqrt(4.0)

    def test_k1_matches_pi_rollout_distribution(self):
        # both sample X iid policy actions and pick by softmax(leaf q / alpha)
        chain = make_random_chain(1, 3, RngStream(27))
        env, policy = chain_exact_env(chain)
        model = ChainModel(env)
        rng = RngStream(28)
        n = 10_000
        atoms = list(chain.atoms[chain.root])
        smc_counts = {a: 0 for a in atoms}
        pir_counts = {a: 0 for a in atoms}
        for i in range(n):
            smc_counts[smc_sample(chain.root, policy, model, particles=4, K=1,
                                  alpha=0.8, gamma=1.0, rng=rng.child(0, i))] += 1
            res = pi_rollout_weights(chain.root, policy, model, M=4, K=1,
                                     alpha=0.8, gamma=1.0, rng=rng.child(1, i))
            j = rng.child(2, i).categorical(res.weights)
            pir_counts[res.actions[j]] += 1
        # two-sample chi-square at ~3 sigma (p ~ 0.0027 -> chi2(2) ~ 11.8)
        stat = 0.0
        for a in atoms:
            s, p = smc_counts[a], pir_counts[a]
            tot = s + p
            if tot:
                stat += (s - tot / 2) ** 2 / (tot / 2) + (p - tot / 2) ** 2 / (tot / 2)
        assert stat < 11.83

    def test_underflow_falls_back_to_uniform(self):
        spec = ChainSpec(root="s", horizon=2)
        spec.add("s", "a", -1e9, "c", -np.inf if False else -1e308)
        spec.add("s", "b", -1e9, "c", -1e308)
        chain = spec.validate()
        env, policy = chain_exact_env(chain)
        metrics = {}
        a = smc_sample(chain.root, policy, ChainModel(env), particles=2, K=1,
                       alpha=1e-3, gamma=1.0, rng=RngStream(29), metrics=metrics)
        assert a in ("a", "b")


class _Bandit:
    """Continuous 1-D model: static state, step reward 1 when action > 0."""

    def __init__(self, reward_fn, leaf_value=0.0):
        self.reward_fn = reward_fn
        self.leaf_value = leaf_value

    def root(self, x):
        return np.zeros(1)

    def features(self, mstate):
        return mstate

    def step(self, mstate, action):
        return mstate, self.reward_fn(np.asarray(action).ravel())

    def leaf_q_many(self, mstate, actions):
        return np.full(len(actions), self.leaf_value)


class TestPgRefine:
    def _policy(self, seed=30):
        net = GaussianPolicyNet(1, 1, (6,))
        theta = net.init(RngStream(seed), init_var=1.0)
        return net, theta

    def test_zero_learning_rate_is_identity(self):
        net, theta = self._policy()
        model = _Bandit(lambda a: float(a[0]))
        rng = RngStream(31)
        out = []
        action = pg_refine(net, theta, None, model, steps=3, rollouts=5, depth=2,
                           lr=0.0, alpha=0.1, gamma=0.9, rng=rng, theta_out=out)
        assert np.array_equal(out[0], theta)
        direct, _ = net.sample_n(theta, np.zeros(1), 1, rng.child(TAG_FINAL_DRAW))
        assert np.array_equal(action, direct[0])

    def test_constant_returns_give_zero_mean_gradient(self):
        # score-function identity: with R constant the expected gradient is 0
        net, theta = self._policy(32)
        model = _Bandit(lambda a: 0.4, leaf_value=1.0)
        rng = RngStream(33)
        n = 10_000
        grads = np.empty((n, theta.size))
        for i in range(n):
            grads[i] = pg_gradient(net, theta, theta, None, model, rollouts=1,
                                   depth=2, alpha=0.5, gamma=0.9,
                                   rng=rng.child(i))
        mean = grads.mean(axis=0)
        se = grads.std(axis=0, ddof=1) / math.sqrt(n)
        assert np.all(np.abs(mean) <= 4.0 * se + 1e-12)

    def test_dominant_action_probability_increases(self):
        # reward favors positive actions; P(action > 0) under the refined
        # policy (exact Gaussian tail) must strictly increase
        net, theta = self._policy(34)
        model = _Bandit(lambda a: 1.0 if a[0] > 0 else 0.0)

        def p_positive(params):
            mean, var, _ = net.dist(params, np.zeros(1))
            return 0.5 * math.erfc(-mean[0] / math.sqrt(2 * var[0]))

        out = []
        pg_refine(net, theta, None, model, steps=10, rollouts=100, depth=3,
                  lr=0.05, alpha=0.01, gamma=0.9, rng=RngStream(35),
                  theta_out=out)
        assert p_positive(out[0]) > p_positive(theta)
