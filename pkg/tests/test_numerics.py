import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from layerprobe import numerics as nx

finite = st.floats(-1.0, 1.0, allow_nan=False)


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i][j] += a[i, p] * b[p, j]
    return np.array(out)


class TestMatmul:
    def test_identity(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(nx.matmul(np.eye(2), x), x)

    def test_projector(self):
        out = nx.matmul(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out, [[5.0, 6.0], [0.0, 0.0]])

    def test_against_triple_loop(self, rng):
        a, b = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 2))
        np.testing.assert_allclose(nx.matmul(a, b), triple_loop(a, b), rtol=0, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="inner dimensions"):
            nx.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_backward(self, rng):
        a, b, u = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 2)), rng.uniform(-1, 1, (3, 2))
        ga, gb = nx.matmul_backward(a, b, u)
        assert nx.gradcheck(lambda: float(np.sum(u * (a @ b))), {"a": a, "b": b}, {"a": ga, "b": gb}) < 1e-6


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nx.softmax(np.zeros(3)), [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_analytic(self):
        np.testing.assert_allclose(nx.softmax(np.array([math.log(2), 0.0])), [2 / 3, 1 / 3], rtol=0, atol=1e-15)

    def test_large_equal_logits(self):
        np.testing.assert_array_equal(nx.softmax(np.array([1000.0, 1000.0])), [0.5, 0.5])

    def test_empty(self):
        with pytest.raises(ValueError):
            nx.softmax(np.zeros(0))

    @given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_normalized_and_shift_invariant(self, v, c):
        y = nx.softmax(v)
        assert np.all(y > 0)
        assert abs(y.sum() - 1.0) <= 1e-12
        np.testing.assert_allclose(nx.softmax(v + c), y, rtol=0, atol=1e-12)


class TestLayerNorm:
    def test_known_row(self):
        y, _ = nx.layernorm(np.array([[1.0, 2.0, 3.0]]), np.ones(3), np.zeros(3))
        np.testing.assert_allclose(y[0], [-1.22474, 0.0, 1.22474], atol=1e-4)
        # direct formula, biased variance 2/3
        direct = [(v - 2.0) / math.sqrt(2.0 / 3.0 + 1e-5) for v in (1.0, 2.0, 3.0)]
        np.testing.assert_allclose(y[0], direct, rtol=0, atol=1e-15)

    def test_constant_row(self):
        y, _ = nx.layernorm(np.full((1, 3), 5.0), np.ones(3), np.zeros(3))
        np.testing.assert_array_equal(y, np.zeros((1, 3)))

    def test_zero_gain_gives_beta(self, rng):
        beta = rng.uniform(-1, 1, 4)
        y, _ = nx.layernorm(rng.uniform(-1, 1, (3, 4)), np.zeros(4), beta)
        np.testing.assert_array_equal(y, np.broadcast_to(beta, (3, 4)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nx.layernorm(np.ones((2, 3)), np.ones(4), np.zeros(4))

    def test_composed_with_matmul_gradcheck(self, rng):
        x, w = rng.uniform(-1, 1, (2, 3)), rng.uniform(-1, 1, (3, 3))
        gamma, beta = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
        u = rng.uniform(-1, 1, (2, 3))
        _, cache = nx.layernorm(x @ w, gamma, beta)
        gh, gg, gb = nx.layernorm_backward(cache, u)
        gx, gw = nx.matmul_backward(x, w, gh)

        def f():
            return float(np.sum(u * nx.layernorm(x @ w, gamma, beta)[0]))

        err = nx.gradcheck(f, {"x": x, "w": w, "g": gamma, "b": beta}, {"x": gx, "w": gw, "g": gg, "b": gb})
        assert err < 1e-6


class TestInterpolate:
    def test_identity(self, rng):
        x = rng.uniform(-1, 1, (5, 2))
        np.testing.assert_array_equal(nx.interpolate_time(x, 5), x)

    def test_midpoint(self):
        np.testing.assert_allclose(nx.interpolate_time(np.array([[0.0], [1.0]]), 3), [[0.0], [0.5], [1.0]])

    def test_constant_extension(self):
        np.testing.assert_array_equal(nx.interpolate_time(np.array([[5.0]]), 3), [[5.0], [5.0], [5.0]])

    def test_single_output_reads_first_row(self):
        np.testing.assert_array_equal(nx.interpolate_time(np.array([[1.0], [2.0], [3.0]]), 1), [[1.0]])

    def test_rejects_empty_target(self):
        with pytest.raises(ValueError):
            nx.interpolate_time(np.ones((3, 2)), 0)

    @given(st.integers(1, 7), st.integers(1, 9), finite, finite, st.integers(0, 2**32 - 1))
    def test_linear(self, t_in, t_out, a, b, seed):
        r = np.random.default_rng(seed)
        x, y = r.uniform(-1, 1, (t_in, 3)), r.uniform(-1, 1, (t_in, 3))
        lhs = nx.interpolate_time(a * x + b * y, t_out)
        rhs = a * nx.interpolate_time(x, t_out) + b * nx.interpolate_time(y, t_out)
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)

    @given(st.integers(1, 7), st.integers(1, 9), st.integers(0, 2**32 - 1))
    def test_backward_is_transpose(self, t_in, t_out, seed):
        r = np.random.default_rng(seed)
        x, u = r.uniform(-1, 1, (t_in, 3)), r.uniform(-1, 1, (t_out, 3))
        lhs = np.sum(nx.interpolate_time(x, t_out) * u)
        rhs = np.sum(x * nx.interpolate_time_backward(u, t_in))
        assert abs(lhs - rhs) <= 1e-10


class TestDropout:
    def test_zero_rate_is_identity(self, rng):
        x = rng.uniform(-1, 1, (4, 4))
        for training in (True, False):
            y, _ = nx.dropout(x, 0.0, nx.make_rng(0), training)
            np.testing.assert_array_equal(y, x)

    def test_eval_is_identity(self, rng):
        x = rng.uniform(-1, 1, (4, 4))
        y, scale = nx.dropout(x, 0.7, None, False)
        np.testing.assert_array_equal(y, x)
        assert scale is None

    def test_expectation(self):
        x = np.linspace(-1, 1, 10).reshape(2, 5) + 2.0
        r = nx.make_rng(3)
        mean = np.mean([nx.dropout(x, 0.5, r, True)[0] for _ in range(10_000)], axis=0)
        assert np.linalg.norm(mean - x) < 0.02 * np.linalg.norm(x)

    def test_rejects_rate_one(self):
        with pytest.raises(ValueError):
            nx.dropout(np.ones(3), 1.0, nx.make_rng(0), True)

    def test_masks_reproducible(self):
        x = np.ones((6, 6))
        a, _ = nx.dropout(x, 0.4, nx.make_rng(11), True)
        b, _ = nx.dropout(x, 0.4, nx.make_rng(11), True)
        assert a.tobytes() == b.tobytes()


def _attn_params(r, f):
    return {k: r.uniform(-1, 1, (f,) if k.startswith("b") else (f, f)) for k in nx.ATTENTION_KEYS}


class TestSelfAttention:
    def test_single_step(self, rng):
        p = _attn_params(rng, 4)
        x = rng.uniform(-1, 1, (1, 4))
        y, cache = nx.self_attention(x, p)
        np.testing.assert_array_equal(cache[4], [[1.0]])
        np.testing.assert_allclose(y, (x @ p["wv"] + p["bv"]) @ p["wo"] + p["bo"], rtol=0, atol=1e-14)

    def test_value_collapse(self, rng):
        p = _attn_params(rng, 4)
        p["wv"][:] = 0
        p["bv"][:] = 0
        y, _ = nx.self_attention(rng.uniform(-1, 1, (5, 4)), p)
        np.testing.assert_array_equal(y, np.broadcast_to(p["bo"], (5, 4)))

    def test_rows_normalized(self, rng):
        _, cache = nx.self_attention(rng.uniform(-1, 1, (3, 4)), _attn_params(rng, 4))
        np.testing.assert_allclose(cache[4].sum(axis=-1), 1.0, rtol=0, atol=1e-12)

    def test_shape_mismatch(self, rng):
        p = _attn_params(rng, 4)
        with pytest.raises(ValueError):
            nx.self_attention(rng.uniform(-1, 1, (3, 5)), p)


class TestGradcheck:
    def test_quadratic(self):
        w = np.array([3.0])
        assert nx.gradcheck(lambda: float(w[0] ** 2), w, np.array([6.0])) < 1e-9

    def test_detects_wrong_gradient(self):
        w = np.array([3.0])
        assert nx.gradcheck(lambda: float(w[0] ** 2), w, np.array([-6.0])) > 1.0

    def test_relative_error_floor(self):
        assert nx.relative_error(1e-3, 2e-3) == pytest.approx(1e-3)
        assert nx.relative_error(100.0, 101.0) == pytest.approx(1 / 101)

    def test_non_finite(self):
        w = np.array([0.0])
        with pytest.raises(nx.NonFiniteError):
            nx.gradcheck(lambda: math.inf, w, np.array([0.0]))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_every_op_on_random_inputs(self, seed):
        from layerprobe import gradcheck

        r = nx.make_rng(seed)
        for name, check in gradcheck.OP_CHECKS.items():
            assert check(r) < 1e-6, name


def test_make_rng_deterministic():
    assert nx.make_rng(5, 1).random(4).tobytes() == nx.make_rng(5, 1).random(4).tobytes()
    assert nx.make_rng(5, 1).random(4).tobytes() != nx.make_rng(5, 2).random(4).tobytes()


def test_check_finite():
    with pytest.raises(nx.NonFiniteError, match="index 2"):
        nx.check_finite(np.array([0.0, 1.0, np.inf]))
