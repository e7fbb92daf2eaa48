"""Tests for the differentiable core: dense layers, GRU, Adam, grad checking."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dear.errors import ConsistencyError, ContractError, ShapeError
from dear.nn import (
    AdamState,
    Dense,
    GRUCell,
    adam_step,
    clip_gradients,
    dense_apply,
    finite_diff_check,
    gru_encode,
)


def straight_line_matvec(w, b, x):
    """Independent oracle: plain-Python matrix-vector multiply."""
    out = []
    for i in range(len(w)):
        acc = b[i]
        for j in range(len(x)):
            acc += w[i][j] * x[j]
        out.append(acc)
    return np.array(out)


class TestDense:
    def test_identity_case(self):
        layer = Dense(np.eye(2), np.zeros(2), "identity")
        np.testing.assert_array_equal(layer.apply(np.array([1.0, 2.0])), [1.0, 2.0])

    def test_zero_weight_tanh(self):
        layer = Dense(np.zeros((1, 3)), np.array([0.5]), "tanh")
        for x in (np.zeros(3), np.ones(3), np.array([-2.0, 7.0, 0.1])):
            np.testing.assert_allclose(layer.apply(x), [np.tanh(0.5)], rtol=0, atol=0)
        assert abs(layer.apply(np.zeros(3))[0] - 0.46212) < 1e-5

    def test_matches_matmul_oracle(self):
        rng = np.random.default_rng(7)
        w = rng.standard_normal((3, 4))
        b = rng.standard_normal(3)
        x = rng.standard_normal(4)
        layer = Dense(w, b, "identity")
        np.testing.assert_allclose(dense_apply(layer, x), straight_line_matvec(w, b, x), rtol=1e-13)

    def test_shape_error(self):
        layer = Dense(np.eye(2), np.zeros(2))
        with pytest.raises(ShapeError):
            layer.apply(np.zeros(3))

    def test_batch_matches_rows(self):
        rng = np.random.default_rng(3)
        layer = Dense.init(rng, 5, 4, "relu")
        xs = rng.standard_normal((6, 5))
        batched = layer.apply(xs)
        for i in range(6):
            np.testing.assert_allclose(batched[i], layer.apply(xs[i]), atol=1e-12)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        layer = Dense.init(rng, 4, 3, "tanh")
        x = rng.standard_normal(4)
        upstream = rng.standard_normal(3)
        y, cache = layer.apply_cached(x)
        _, dw, db = layer.backward(cache, upstream)
        params = {"w": layer.weights, "b": layer.bias}
        report = finite_diff_check(params, lambda: float(upstream @ layer.apply(x)),
                                   {"w": dw, "b": db}, tolerance=1e-6, step=1e-5)
        assert report.passed, report.summary()


def reference_gru_step(cell, x, h):
    """Independent oracle: the three gate equations written out explicitly."""
    def sig(a):
        return 1.0 / (1.0 + np.exp(-a))

    z = sig(cell.wz @ x + cell.uz @ h + cell.bz)
    r = sig(cell.wr @ x + cell.ur @ h + cell.br)
    c = np.tanh(cell.wh @ x + cell.uh @ (r * h) + cell.bh)
    return (1.0 - z) * h + z * c


class TestGRU:
    def test_empty_sequence_returns_h0(self):
        cell = GRUCell(3, 4, rng=np.random.default_rng(0))
        np.testing.assert_array_equal(gru_encode(cell, []), np.zeros(4))
        h0 = np.array([0.1, -0.2, 0.3, 0.4])
        np.testing.assert_array_equal(gru_encode(cell, [], h0), h0)

    def test_zero_parameters_halve_hidden_state(self):
        # All-zero parameters: update gate 0.5, candidate 0, so h' = 0.5 * h.
        zeros = {f"{k}{g}": np.zeros((4, 4) if k in "wu" else 4)
                 for g in "zrh" for k in "wub"}
        cell = GRUCell(4, 4, params=zeros)
        h = np.array([1.0, -2.0, 4.0, 0.0])
        np.testing.assert_allclose(cell.step(np.ones(4), h), 0.5 * h, atol=1e-15)
        np.testing.assert_array_equal(cell.encode([np.ones(4)] * 3), np.zeros(4))

    def test_matches_unrolled_oracle(self):
        rng = np.random.default_rng(21)
        cell = GRUCell(5, 3, rng=rng)
        seq = rng.standard_normal((3, 5))
        h = np.zeros(3)
        for x in seq:
            h = reference_gru_step(cell, x, h)
        np.testing.assert_allclose(cell.encode(seq), h, atol=1e-12)

    def test_batch_matches_single_with_ragged_lengths(self):
        rng = np.random.default_rng(5)
        cell = GRUCell(4, 6, rng=rng)
        lengths = [0, 1, 3, 5]
        xs = np.zeros((4, 5, 4))
        singles = []
        for i, n in enumerate(lengths):
            seq = rng.standard_normal((n, 4))
            xs[i, :n] = seq
            singles.append(cell.encode(seq))
        batched, _ = cell.encode_batch(xs, np.array(lengths))
        for i in range(4):
            np.testing.assert_allclose(batched[i], singles[i], atol=1e-12)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        cell = GRUCell(3, 4, rng=rng)
        xs = rng.standard_normal((2, 5, 3))
        lengths = np.array([5, 2])
        upstream = rng.standard_normal((2, 4))
        _, cache = cell.encode_batch(xs, lengths)
        grads = cell.backward_batch(cache, upstream)
        params = dict(cell.param_items("g"))
        analytic = {f"g.{k}": v for k, v in grads.items()}

        def loss():
            h, _ = cell.encode_batch(xs, lengths)
            return float(np.sum(upstream * h))

        report = finite_diff_check(params, loss, analytic, tolerance=1e-6, step=1e-5)
        assert report.passed, report.summary()

    def test_shape_errors(self):
        cell = GRUCell(3, 4, rng=np.random.default_rng(0))
        with pytest.raises(ShapeError):
            cell.step(np.zeros(5), np.zeros(4))
        with pytest.raises(ShapeError):
            cell.encode([np.zeros(3)], h0=np.zeros(2))


class TestAdam:
    def _params(self):
        return {"w": np.array([1.0, -2.0]), "b": np.array([0.5])}

    def test_zero_gradient_leaves_params(self):
        params = self._params()
        before = {k: v.copy() for k, v in params.items()}
        state = AdamState.init(params)
        adam_step(params, {k: np.zeros_like(v) for k, v in params.items()}, state)
        for k in params:
            np.testing.assert_array_equal(params[k], before[k])
        assert state.step == 1

    def test_first_step_closed_form(self):
        # After one step the bias-corrected update is lr * g / (|g| + eps).
        g = 0.73
        params = {"w": np.array([2.0])}
        state = AdamState.init(params, learning_rate=1e-3)
        adam_step(params, {"w": np.array([g])}, state)
        expected = 2.0 - 1e-3 * g / (abs(g) + 1e-8)
        np.testing.assert_allclose(params["w"], [expected], rtol=1e-12)

    def test_determinism(self):
        grads = {"w": np.array([0.3, -0.4]), "b": np.array([0.9])}
        results = []
        for _ in range(2):
            params = self._params()
            state = AdamState.init(params, learning_rate=0.01)
            for _ in range(5):
                adam_step(params, grads, state)
            results.append({k: v.copy() for k, v in params.items()})
        for k in results[0]:
            np.testing.assert_array_equal(results[0][k], results[1][k])

    def test_missing_gradient_is_error(self):
        params = self._params()
        state = AdamState.init(params)
        with pytest.raises(ConsistencyError):
            adam_step(params, {"w": np.zeros(2)}, state)

    def test_moments_decay_with_zero_gradient(self):
        params = self._params()
        state = AdamState.init(params)
        adam_step(params, {"w": np.array([1.0, 1.0]), "b": np.array([1.0])}, state)
        m_before = state.m["w"].copy()
        adam_step(params, {k: np.zeros_like(v) for k, v in params.items()}, state)
        np.testing.assert_allclose(state.m["w"], 0.9 * m_before, rtol=1e-12)


def test_clip_gradients_scales_to_max_norm():
    grads = {"a": np.array([3.0, 4.0])}
    norm = clip_gradients(grads, 1.0)
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose(grads["a"], [0.6, 0.8])
    small = {"a": np.array([0.3, 0.4])}
    clip_gradients(small, 1.0)
    np.testing.assert_allclose(small["a"], [0.3, 0.4])


class TestFiniteDiffHarness:
    def test_linear_network_near_machine_eps(self):
        rng = np.random.default_rng(2)
        layer = Dense.init(rng, 3, 2, "identity")
        x = rng.standard_normal(3)
        w = rng.standard_normal(2)
        y, cache = layer.apply_cached(x)
        _, dw, db = layer.backward(cache, w)
        report = finite_diff_check({"w": layer.weights, "b": layer.bias},
                                   lambda: float(w @ layer.apply(x)),
                                   {"w": dw, "b": db}, tolerance=1e-9)
        assert report.passed, report.summary()

    def test_corrupted_gradient_flags_exactly_that_block(self):
        rng = np.random.default_rng(4)
        layer = Dense.init(rng, 3, 2, "tanh")
        x = rng.standard_normal(3)
        w = rng.standard_normal(2)
        y, cache = layer.apply_cached(x)
        _, dw, db = layer.backward(cache, w)
        corrupted = {"w": dw.copy(), "b": db.copy()}
        corrupted["b"][0] *= 2.0
        report = finite_diff_check({"w": layer.weights, "b": layer.bias},
                                   lambda: float(w @ layer.apply(x)),
                                   corrupted, tolerance=1e-4)
        assert not report.passed
        assert report.failing_blocks() == ["b"]

    def test_non_finite_loss_raises(self):
        params = {"p": np.array([1.0])}
        with pytest.raises(ContractError):
            finite_diff_check(params, lambda: float("nan"), {"p": np.array([0.0])})


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=15, deadline=None)
def test_dense_forward_deterministic(seed):
    rng = np.random.default_rng(seed)
    layer = Dense.init(rng, 4, 3, "relu")
    x = rng.standard_normal(4)
    np.testing.assert_array_equal(layer.apply(x), layer.apply(x))
