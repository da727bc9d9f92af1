import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import softmax

from ltvrec.policies import (
    PolicyParams, action_log_probs, action_ranks, behavior_direction, choose_alpha,
    feature_dim, fit_behavior_policy, item_scores, joint_features, make_target_policy,
    mean_kl, mix_policies, policy_probabilities, rank_of_action, split_weights,
)

from conftest import random_trajectories


def _brute_scores(w, s, V):
    return np.array([joint_features(s, V[:, j]) @ w for j in range(V.shape[1])])


class TestFeatures:
    def test_layout(self):
        phi = joint_features([1.0, 2.0], [3.0, 4.0])
        np.testing.assert_array_equal(phi, [1, 2, 3, 4, 3, 8, 1])
        assert feature_dim(2) == 7

    def test_broadcast(self):
        phi = joint_features(np.ones((5, 3)), np.arange(3.0))
        assert phi.shape == (5, 10)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            joint_features([1.0], [1.0, 2.0])

    def test_split(self):
        ws, wv, wp, wc = split_weights(np.arange(7.0), 2)
        assert wc == 6.0 and list(wp) == [4, 5]


class TestSoftmax:
    def test_scores_match_brute_force(self):
        rng = np.random.default_rng(0)
        V = rng.normal(size=(3, 6))
        w, s = rng.normal(size=10), rng.normal(size=3)
        np.testing.assert_allclose(item_scores(w, s[None], V)[0], _brute_scores(w, s, V))

    def test_zero_weights_uniform(self):
        p = policy_probabilities(np.zeros(7), np.zeros((2, 2)), np.ones((2, 4)))
        np.testing.assert_allclose(p, 0.25)

    def test_large_scores_stable(self):
        V = np.array([[1000.0, 0.0]])
        w = np.array([0.0, 1.0, 0.0, 0.0])
        p = policy_probabilities(w, np.zeros((1, 1)), V)
        np.testing.assert_allclose(p, [[1.0, 0.0]])
        assert np.isfinite(action_log_probs(w, np.zeros((1, 1)), np.array([1]), V)).all()

    @settings(max_examples=40)
    @given(st.integers(0, 10_000))
    def test_positive_and_normalized(self, seed):
        rng = np.random.default_rng(seed)
        V = rng.normal(size=(2, 5))
        p = policy_probabilities(rng.normal(0, 3, 7), rng.normal(size=(4, 2)), V)
        assert (p > 0).all()
        np.testing.assert_allclose(p.sum(axis=1), 1.0)

    def test_log_probs_chunking(self):
        traj, V = random_trajectories(n_users=40, seed=1)
        w = np.random.default_rng(1).normal(size=10)
        a = action_log_probs(w, traj.states, traj.items, V, chunk=7)
        expect = np.log(softmax(item_scores(w, traj.states, V), axis=1)[np.arange(traj.n_steps), traj.items])
        np.testing.assert_allclose(a, expect, atol=1e-12)

    def test_kl_zero_for_same_policy(self):
        traj, V = random_trajectories(seed=2)
        w = np.ones(10)
        assert mean_kl(w, w, traj.states, V) == pytest.approx(0.0, abs=1e-12)

    def test_kl_oracle(self):
        V = np.eye(2)
        s = np.zeros((1, 2))
        wp = np.zeros(7); wp[2] = np.log(3.0)  # p = (1/4, 3/4)
        p = np.array([0.25, 0.75])
        assert mean_kl(wp, np.zeros(7), s, V) == pytest.approx(np.sum(p * np.log(p / 0.5)))


class TestBehaviorFit:
    def test_recovers_scale_on_grid(self):
        traj, V = random_trajectories(n_users=200, seed=4)
        pol = fit_behavior_policy(traj, V, n_grid=11)
        g = behavior_direction(traj, V)
        np.testing.assert_allclose(pol.w, pol.meta["C"] * g)
        grid = np.logspace(-4, 4, 11) / np.linalg.norm(g)
        ll = [action_log_probs(c * g, traj.states, traj.items, V).sum() for c in grid]
        assert pol.meta["grid_index"] == int(np.argmax(ll))

    def test_zero_items_give_uniform_policy(self):
        # only the constant feature survives, and it cancels in the softmax
        traj, V = random_trajectories(seed=0)
        pol = fit_behavior_policy(traj, np.zeros_like(V))
        p = policy_probabilities(pol.w, traj.states, np.zeros_like(V))
        np.testing.assert_allclose(p, 1.0 / V.shape[1])


class TestTarget:
    def test_alpha_meets_kl(self):
        traj, V = random_trajectories(n_users=50, seed=5)
        theta = np.random.default_rng(5).normal(size=10)
        a = choose_alpha(theta, np.zeros(10), traj.states, V, max_kl=0.2)
        assert mean_kl(a * theta, np.zeros(10), traj.states, V) <= 0.2 + 1e-12
        assert mean_kl(a * 1.01 * theta, np.zeros(10), traj.states, V) > 0.2 - 1e-3

    def test_alpha_zero_theta(self):
        assert choose_alpha(np.zeros(4), np.zeros(4), np.zeros((2, 1)), np.ones((1, 3))) == 1.0

    def test_infeasible_warns(self):
        V = np.eye(2)
        wb = np.zeros(7); wb[2] = 50.0
        theta = np.zeros(7); theta[3] = 1.0
        with pytest.warns(UserWarning):
            choose_alpha(theta, wb, np.zeros((1, 2)), V, max_kl=1e-3, span=10)

    def test_make_target(self):
        p = make_target_policy([1.0, 2.0], 0.5)
        np.testing.assert_array_equal(p.w, [0.5, 1.0])
        with pytest.raises(ValueError):
            make_target_policy([1.0], 0.0)

    def test_mixture_endpoints(self):
        wt, wb = np.arange(4.0), -np.arange(4.0)
        np.testing.assert_array_equal(mix_policies(wt, wb, 1.0).w, wt)
        np.testing.assert_array_equal(mix_policies(wt, wb, 0.0).w, wb)
        np.testing.assert_allclose(mix_policies(wt, wb, 0.25).w, -0.5 * np.arange(4.0))
        with pytest.raises(ValueError):
            mix_policies(wt, wb, 1.5)

    def test_params_roundtrip(self, tmp_path):
        p = PolicyParams(np.array([0.1, -2.0, 3.0, 0.0]), "target", {"alpha": 2.0})
        p.save(tmp_path / "p.json")
        back = PolicyParams.load(tmp_path / "p.json")
        np.testing.assert_array_equal(back.w, p.w)
        assert back.kind == "target" and back.meta == {"alpha": 2.0}


class TestRanks:
    def test_rank_examples(self):
        V = np.array([[3.0, 1.0, 2.0, 2.0]])
        w = np.array([0.0, 1.0, 0.0, 0.0])
        s = np.zeros(1)
        assert [rank_of_action(w, s, V, j) for j in range(4)] == [1, 4, 2, 3]

    def test_vectorized_matches_scalar(self):
        traj, V = random_trajectories(n_users=20, seed=6)
        w = np.random.default_rng(6).normal(size=10)
        fast = action_ranks(w, traj.states, traj.items, V, chunk=5)
        slow = [rank_of_action(w, traj.states[i], V, traj.items[i]) for i in range(traj.n_steps)]
        np.testing.assert_array_equal(fast, slow)
        assert fast.min() >= 1 and fast.max() <= V.shape[1]
