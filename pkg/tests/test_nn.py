"""MLP forward/backward, Adam, polyak averaging, finite differences and checkpoints."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softq.checkpoint import (agent_from_bytes, agent_to_bytes, load_agent, load_table, save_agent, save_table,
                              table_from_bytes, table_to_bytes)
from softq.agents import ADAPTIVE, QOP, make_agent, train_step
from softq.mdp import Transition, TrajectorySegment
from softq.nn import (CheckpointError, MlpParams, adam_init, adam_step, backward, finite_diff_grad, forward,
                      load_params, mlp_init, params_from_bytes, params_to_bytes, polyak_update, predict, save_params)
from softq.spg import relative_deviation

layer_specs = st.lists(st.integers(1, 8), min_size=2, max_size=4)


def randomized(sizes, seed):
    params = mlp_init(sizes, seed)
    rng = np.random.default_rng(seed + 1)
    params.biases = [rng.normal(scale=0.3, size=b.shape) for b in params.biases]
    return params


class TestInit:
    def test_deterministic(self):
        a, b = mlp_init((5, 7, 3), 4), mlp_init((5, 7, 3), 4)
        np.testing.assert_array_equal(a.flat(), b.flat())

    def test_zero_biases(self):
        assert all(np.all(b == 0.0) for b in mlp_init((5, 7, 3), 0).biases)

    def test_he_variance(self):
        params = mlp_init((256, 128, 64, 4), 0)
        for w in params.weights[:2]:
            expected = 2.0 / w.shape[1]
            assert abs(w.var() - expected) <= 0.2 * expected

    def test_output_scale(self):
        a, b = mlp_init((4, 6, 3), 1), mlp_init((4, 6, 3), 1, output_scale=1e-3)
        np.testing.assert_array_equal(a.weights[0], b.weights[0])
        np.testing.assert_allclose(b.weights[1], 1e-3 * a.weights[1], rtol=1e-15)

    def test_rejects_too_few_layers(self):
        with pytest.raises(ValueError):
            mlp_init((4,), 0)
        with pytest.raises(ValueError):
            mlp_init((4, 0, 2), 0)


class TestForward:
    def test_zero_net(self):
        out, _ = forward(mlp_init((3, 5, 2), 0).zeros_like(), np.ones(3))
        np.testing.assert_array_equal(out, 0.0)

    def test_identity_layer(self):
        params = MlpParams((3, 3), [np.eye(3)], [np.zeros(3)])
        x = np.array([-1.0, 0.5, 2.0])
        np.testing.assert_array_equal(forward(params, x)[0], x)

    def test_batch_and_single_agree(self):
        params = randomized((4, 6, 3), 2)
        x = np.random.default_rng(0).normal(size=(5, 4))
        batch = forward(params, x)[0]
        for i in range(5):
            np.testing.assert_allclose(forward(params, x[i])[0], batch[i], rtol=1e-14, atol=1e-14)
        np.testing.assert_array_equal(predict(params, x), batch)

    def test_rejects_dimension_mismatch(self):
        with pytest.raises(ValueError):
            forward(mlp_init((3, 2), 0), np.ones(4))

    def test_serialized_round_trip_is_bitwise(self):
        params = randomized((6, 9, 9, 4), 3)
        restored, end = params_from_bytes(params_to_bytes(params))
        x = np.random.default_rng(1).normal(size=(7, 6))
        assert end == len(params_to_bytes(params))
        np.testing.assert_array_equal(forward(restored, x)[0], forward(params, x)[0])


class TestBackward:
    def test_zero_output_grad(self):
        params = randomized((3, 4, 2), 0)
        out, cache = forward(params, np.ones(3))
        assert np.all(backward(params, cache, np.zeros(2)).flat() == 0.0)

    def test_linear_layer_outer_product(self):
        rng = np.random.default_rng(0)
        params = MlpParams((4, 3), [rng.normal(size=(3, 4))], [rng.normal(size=3)])
        x, g = rng.normal(size=4), rng.normal(size=3)
        _, cache = forward(params, x)
        grads = backward(params, cache, g)
        np.testing.assert_allclose(grads.weights[0], np.outer(g, x), rtol=1e-15)
        np.testing.assert_allclose(grads.biases[0], g, rtol=1e-15)

    def test_rejects_stale_cache(self):
        params = randomized((3, 4, 2), 0)
        _, cache = forward(params, np.ones(3))
        with pytest.raises(ValueError):
            backward(params.copy(), cache, np.ones(2))

    @settings(max_examples=25, deadline=None)
    @given(layer_specs, st.integers(0, 10_000), st.integers(1, 6))
    def test_matches_finite_differences(self, sizes, seed, batch):
        params = randomized(sizes, seed)
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(batch, sizes[0]))
        y = rng.normal(size=(batch, sizes[-1]))

        def loss(p):
            return 0.5 * float(np.sum((predict(p, x) - y) ** 2))

        out, cache = forward(params, x)
        grads = backward(params, cache, out - y)
        assert relative_deviation(grads, finite_diff_grad(loss, params)) < 1e-4


class TestAdam:
    def test_zero_grad_leaves_params(self):
        params = randomized((3, 4, 2), 0)
        new, state = adam_step(params, params.zeros_like(), adam_init(params), 1e-3)
        np.testing.assert_array_equal(new.flat(), params.flat())
        assert state.step == 1

    def test_first_step_is_signed_lr(self):
        """Bias correction makes step one lr * g / (|g| + eps)."""
        params = randomized((3, 4, 2), 1)
        grads = params.with_flat(np.random.default_rng(0).normal(size=params.size))
        new, _ = adam_step(params, grads, adam_init(params), 1e-3)
        g = grads.flat()
        np.testing.assert_allclose(params.flat() - new.flat(), 1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-9)
        np.testing.assert_allclose(np.abs(params.flat() - new.flat()), 1e-3, rtol=1e-6)

    def test_deterministic_and_pure(self):
        params = randomized((3, 4, 2), 2)
        grads = params.with_flat(np.linspace(-1, 1, params.size))
        state = adam_init(params)
        a = adam_step(params, grads, state, 1e-2)
        b = adam_step(params, grads, state, 1e-2)
        np.testing.assert_array_equal(a[0].flat(), b[0].flat())
        assert state.step == 0

    def test_step_counter_increases(self):
        params = randomized((3, 2), 0)
        state = adam_init(params)
        for k in range(1, 4):
            params, state = adam_step(params, params.zeros_like(), state, 1e-3)
            assert state.step == k

    def test_rejects_bad_grads(self):
        params = randomized((3, 2), 0)
        with pytest.raises(ValueError):
            adam_step(params, randomized((3, 3), 0), adam_init(params), 1e-3)
        bad = params.with_flat(np.full(params.size, np.nan))
        with pytest.raises(FloatingPointError):
            adam_step(params, bad, adam_init(params), 1e-3)


class TestPolyak:
    def test_tau_one_copies_main(self):
        t, m = randomized((3, 4, 2), 0), randomized((3, 4, 2), 1)
        np.testing.assert_array_equal(polyak_update(t, m, 1.0).flat(), m.flat())

    def test_tau_zero_keeps_target(self):
        t, m = randomized((3, 4, 2), 0), randomized((3, 4, 2), 1)
        np.testing.assert_array_equal(polyak_update(t, m, 0.0).flat(), t.flat())

    def test_midpoint(self):
        t = mlp_init((3, 2), 0).zeros_like()
        m = t.with_flat(np.full(t.size, 2.0))
        np.testing.assert_array_equal(polyak_update(t, m, 0.5).flat(), 1.0)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            polyak_update(randomized((3, 2), 0), randomized((3, 3), 0), 0.5)

    @given(st.integers(0, 1000), st.floats(0.0, 1.0))
    def test_convex_combination(self, seed, tau):
        t, m = randomized((3, 4, 2), seed), randomized((3, 4, 2), seed + 7)
        new = polyak_update(t, m, tau).flat()
        lo, hi = np.minimum(t.flat(), m.flat()), np.maximum(t.flat(), m.flat())
        assert np.all(new >= lo - 1e-15) and np.all(new <= hi + 1e-15)


class TestFiniteDiff:
    def test_quadratic(self):
        theta = np.random.default_rng(0).normal(size=10)
        np.testing.assert_allclose(finite_diff_grad(lambda t: 0.5 * float(t @ t), theta), theta, atol=1e-8)

    def test_linear(self):
        c = np.random.default_rng(1).normal(size=6)
        np.testing.assert_allclose(finite_diff_grad(lambda t: float(c @ t), np.zeros(6)), c, rtol=1e-9)

    def test_rejects_non_finite_loss(self):
        with pytest.raises(FloatingPointError):
            finite_diff_grad(lambda t: float("nan"), np.zeros(2))


class TestCheckpoints:
    def test_params_file_round_trip(self, tmp_path):
        params = randomized((4, 5, 3), 0)
        save_params(tmp_path / "net.bin", params)
        np.testing.assert_array_equal(load_params(tmp_path / "net.bin").flat(), params.flat())

    def test_bad_magic_and_truncation(self):
        blob = params_to_bytes(randomized((4, 5, 3), 0))
        with pytest.raises(CheckpointError):
            params_from_bytes(b"X" + blob[1:])
        with pytest.raises(CheckpointError):
            params_from_bytes(blob[:-8])

    def test_agent_round_trip_is_bitwise(self, tmp_path):
        agent = make_agent((5, 8, 3), QOP, seed=3, alpha=0.37, alpha_mode=ADAPTIVE, n=3)
        rng = np.random.default_rng(0)
        seg = TrajectorySegment([Transition(rng.normal(size=5), 1, 0.5, rng.normal(size=5), True)], False)
        train_step(agent, [seg])
        save_agent(tmp_path / "a.ckpt", agent, {"note": "x"})
        restored, extra = load_agent(tmp_path / "a.ckpt")
        assert extra == {"note": "x"}
        assert restored.alpha == agent.alpha
        assert (restored.algorithm, restored.n, restored.gamma, restored.tau) == (QOP, 3, agent.gamma, agent.tau)
        x = rng.normal(size=(4, 5))
        for name in ("q1", "q2", "q1_target", "q2_target"):
            np.testing.assert_array_equal(predict(getattr(restored, name), x), predict(getattr(agent, name), x))

    def test_agent_shape_mismatch_is_named(self):
        blob = bytearray(agent_to_bytes(make_agent((5, 8, 3), QOP)))
        blob = bytes(blob).replace(b'"layer_sizes": [5, 8, 3]', b'"layer_sizes": [5, 8, 4]')
        with pytest.raises(CheckpointError, match="network q1"):
            agent_from_bytes(blob, "x.ckpt")

    def test_agent_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.ckpt"):
            load_agent(tmp_path / "nope.ckpt")

    def test_table_round_trip(self, tmp_path):
        q = np.random.default_rng(0).normal(size=(6, 4))
        save_table(tmp_path / "q.tbl", q)
        np.testing.assert_array_equal(load_table(tmp_path / "q.tbl"), q)
        with pytest.raises(CheckpointError):
            table_from_bytes(table_to_bytes(q)[:-1])
