"""Soft-Q regression gradient versus the value-plus-policy decomposition."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softq.nn import MlpParams, finite_diff_grad, forward, mlp_init, predict
from softq.spg import (decompose_q, relative_deviation, sample_batch, spg_gradient, spg_surrogate, spg_terms,
                       sql_gradient, sql_loss, verify_equivalence)


def random_net(sizes, seed):
    params = mlp_init(sizes, seed)
    rng = np.random.default_rng(seed)
    params.biases = [rng.normal(scale=0.2, size=b.shape) for b in params.biases]
    return params


class TestDecompose:
    def test_zero_row(self):
        params = MlpParams((2, 5), [np.zeros((5, 2))], [np.zeros(5)])
        V, log_pi = decompose_q(params, np.ones((1, 2)), 0.3)
        np.testing.assert_allclose(V, 0.3 * np.log(5), rtol=1e-15)
        np.testing.assert_allclose(log_pi, -np.log(5), rtol=1e-15)

    def test_single_action(self):
        params = random_net((3, 1), 0)
        obs = np.random.default_rng(0).normal(size=(4, 3))
        V, log_pi = decompose_q(params, obs, 0.5)
        np.testing.assert_allclose(V, predict(params, obs)[:, 0], rtol=1e-14)
        np.testing.assert_array_equal(log_pi, 0.0)

    def test_rejects_nonpositive_alpha(self):
        with pytest.raises(ValueError):
            decompose_q(random_net((3, 2), 0), np.ones(3), 0.0)

    @given(st.integers(0, 10_000), st.floats(1e-2, 10.0))
    def test_reconstruction_and_normalization(self, seed, alpha):
        params = random_net((4, 6, 5), seed)
        obs = np.random.default_rng(seed).normal(size=(3, 4))
        V, log_pi = decompose_q(params, obs, alpha)
        q = predict(params, obs)
        np.testing.assert_allclose(V[:, None] + alpha * log_pi, q, rtol=0, atol=1e-12 * max(1.0, np.abs(q).max()))
        np.testing.assert_allclose(np.exp(log_pi).sum(axis=1), 1.0, atol=1e-12)


class TestSqlGradient:
    def setup_method(self):
        self.params = random_net((5, 8, 3), 1)
        self.obs, self.actions, self.targets = sample_batch(self.params, 12, 0.5, np.random.default_rng(2))

    def test_zero_at_own_values(self):
        q = predict(self.params, self.obs)[np.arange(12), self.actions]
        assert np.all(sql_gradient(self.params, self.obs, self.actions, q).flat() == 0.0)

    def test_matches_finite_differences(self):
        g = sql_gradient(self.params, self.obs, self.actions, self.targets)
        fd = finite_diff_grad(lambda p: sql_loss(p, self.obs, self.actions, self.targets), self.params)
        assert relative_deviation(g, fd) < 1e-4

    def test_duplicated_batch_is_invariant(self):
        g1 = sql_gradient(self.params, self.obs, self.actions, self.targets)
        g2 = sql_gradient(self.params, np.tile(self.obs, (2, 1)), np.tile(self.actions, 2), np.tile(self.targets, 2))
        np.testing.assert_allclose(g2.flat(), g1.flat(), rtol=1e-12, atol=1e-15)

    def test_rejects_non_finite_targets(self):
        with pytest.raises(FloatingPointError):
            sql_gradient(self.params, self.obs, self.actions, np.full(12, np.inf))


class TestSpgGradient:
    def test_zero_at_own_values(self):
        params = random_net((5, 8, 3), 3)
        obs, actions, _ = sample_batch(params, 10, 0.4, np.random.default_rng(0))
        q = predict(params, obs)[np.arange(10), actions]
        value, policy = spg_terms(params, obs, actions, q, 0.4)
        np.testing.assert_allclose(value.flat(), 0.0, atol=1e-14)
        np.testing.assert_allclose(policy.flat(), 0.0, atol=1e-14)

    def test_one_action_is_value_regression(self):
        params = random_net((3, 4, 1), 0)
        obs = np.random.default_rng(1).normal(size=(1, 3))
        target = np.array([0.7])
        value, policy = spg_terms(params, obs, np.array([0]), target, 0.9)
        assert np.all(policy.flat() == 0.0)
        np.testing.assert_allclose(value.flat(), sql_gradient(params, obs, np.array([0]), target).flat(),
                                   rtol=1e-12, atol=1e-15)

    def test_matches_surrogate_finite_differences(self):
        params = random_net((4, 6, 3), 5)
        obs, actions, targets = sample_batch(params, 8, 0.8, np.random.default_rng(5))
        g = spg_gradient(params, obs, actions, targets, 0.8)
        fd = finite_diff_grad(lambda p: spg_surrogate(p, obs, actions, targets, 0.8, params), params)
        assert relative_deviation(g, fd) < 1e-4

    def test_plain_value_target_breaks_identity(self):
        """Regressing V on the raw target misses the entropy cross term."""
        params = random_net((4, 6, 3), 6)
        obs, actions, targets = sample_batch(params, 8, 0.8, np.random.default_rng(6))
        g = spg_gradient(params, obs, actions, targets, 0.8, entropy_value_target=False)
        assert relative_deviation(g, sql_gradient(params, obs, actions, targets)) > 1e-3


class TestVerifyEquivalence:
    def test_reference_case(self):
        rep = verify_equivalence(0, (8, 16, 4), 16, 0.7)
        assert rep.passed and rep.max_rel_deviation < 1e-6
        assert all(d["max_rel_deviation"] >= 0 for d in rep.per_layer)

    @pytest.mark.parametrize("alpha", [1e3, 1e-2])
    def test_alpha_extremes(self, alpha):
        assert verify_equivalence(1, (8, 16, 4), 16, alpha).passed

    def test_dropped_policy_term_fails(self):
        rep = verify_equivalence(0, (8, 16, 4), 16, 0.7, drop_policy_term=True)
        assert not rep.passed and rep.max_rel_deviation > 1e-3

    def test_constant_n_step_style_targets(self):
        rep = verify_equivalence(2, (6, 10, 5), 20, 0.3, targets=np.linspace(-3, 3, 20))
        assert rep.passed

    def test_report_serializes(self):
        d = verify_equivalence(0, check_fd=True).to_dict()
        assert d["passed"] and set(d["fd_rel_deviation"]) == {"sql", "spg"}

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.lists(st.integers(2, 10), min_size=2, max_size=4), st.integers(1, 24),
           st.floats(1e-2, 10.0))
    def test_identity_holds_generally(self, seed, sizes, batch, alpha):
        assert verify_equivalence(seed, tuple(sizes), batch, alpha).passed
