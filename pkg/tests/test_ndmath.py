import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saol import ndmath
from saol.errors import ArgumentError, DimensionError


class TestMatmul:
    def test_identity(self):
        rng = ndmath.stream_rng(0, "init")
        a = ndmath.uniform_init(rng, 3, 3)
        eye = np.eye(3)
        np.testing.assert_array_equal(ndmath.matmul(eye, a), a)
        np.testing.assert_array_equal(ndmath.matmul(a, eye), a)

    def test_hand_product(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0], [6.0]])
        np.testing.assert_array_equal(ndmath.matmul(a, b), [[17.0], [39.0]])

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"2, 3"):
            ndmath.matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_associativity_with_identity(self):
        rng = ndmath.stream_rng(1, "init")
        a = ndmath.uniform_init(rng, 4, 5)
        b = ndmath.uniform_init(rng, 5, 2)
        eye = np.eye(5)
        left = ndmath.matmul(ndmath.matmul(a, eye), b)
        right = ndmath.matmul(a, ndmath.matmul(eye, b))
        np.testing.assert_array_equal(left, right)
        np.testing.assert_array_equal(left, ndmath.matmul(a, b))

    def test_repeated_evaluation_bit_identical(self):
        rng = ndmath.stream_rng(2, "init")
        a = ndmath.uniform_init(rng, 17, 23)
        b = ndmath.uniform_init(rng, 23, 11)
        first = ndmath.matmul(a, b)
        for _ in range(3):
            np.testing.assert_array_equal(ndmath.matmul(a, b), first)


class TestTanh:
    def test_zero(self):
        assert ndmath.tanh_map(np.zeros((2, 2))).sum() == 0.0

    def test_reference_value(self):
        out = ndmath.tanh_map(np.array([[1.0]]))
        assert out[0, 0] == pytest.approx(math.tanh(1.0), abs=1e-15)

    def test_odd_symmetry(self):
        rng = ndmath.stream_rng(3, "init")
        x = rng.normal(size=(4, 5))
        np.testing.assert_array_equal(ndmath.tanh_map(-x), -ndmath.tanh_map(x))

    def test_open_interval(self):
        # float64 tanh saturates to exactly +-1 beyond |x| ~ 19; test the
        # representable range.
        out = ndmath.tanh_map(np.linspace(-18.0, 18.0, 1001))
        assert np.all(out < 1.0) and np.all(out > -1.0)


class TestSoftmax:
    def test_uniform_on_constant(self):
        np.testing.assert_allclose(ndmath.softmax(np.array([7.0, 7.0, 7.0])),
                                   [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_closed_form(self):
        out = ndmath.softmax(np.array([0.0, math.log(3.0)]))
        np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-12)

    def test_stabilized(self):
        out = ndmath.softmax(np.array([1000.0, 0.0]))
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1.0, abs=1e-12)
        assert out[1] == pytest.approx(0.0, abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ArgumentError):
            ndmath.softmax(np.array([]))

    @settings(deadline=None, max_examples=50)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12),
           st.floats(-100, 100))
    def test_shift_invariance_and_normalization(self, logits, shift):
        z = np.array(logits)
        base = ndmath.softmax(z)
        shifted = ndmath.softmax(z + shift)
        assert abs(base.sum() - 1.0) < 1e-12
        np.testing.assert_allclose(base, shifted, atol=1e-12)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = np.array([[1.0, -2.0]])
        st_ = ndmath.AdamState.for_param(p)
        before = p.copy()
        ndmath.adam_step(p, np.zeros_like(p), st_)
        np.testing.assert_array_equal(p, before)

    def test_moments_decay(self):
        p = np.zeros((1, 2))
        st_ = ndmath.AdamState.for_param(p)
        st_.m[...] = 1.0
        st_.v[...] = 1.0
        ndmath.adam_step(p, np.zeros_like(p), st_)
        np.testing.assert_allclose(st_.m, 0.9, atol=1e-15)
        np.testing.assert_allclose(st_.v, 0.999, atol=1e-15)

    def test_first_step_moves_by_learning_rate(self):
        # Bias correction makes the first step ~lr for unit gradient.
        p = np.array([[0.5]])
        st_ = ndmath.AdamState.for_param(p, lr=0.001)
        ndmath.adam_step(p, np.ones_like(p), st_)
        assert p[0, 0] == pytest.approx(0.5 - 0.001, abs=1e-9)
        assert st_.step == 1

    def test_deterministic(self):
        rng = ndmath.stream_rng(4, "init")
        g = ndmath.uniform_init(rng, 3, 3)
        p1 = np.ones((3, 3))
        p2 = np.ones((3, 3))
        s1 = ndmath.AdamState.for_param(p1)
        s2 = ndmath.AdamState.for_param(p2)
        for _ in range(5):
            ndmath.adam_step(p1, g, s1)
            ndmath.adam_step(p2, g, s2)
        np.testing.assert_array_equal(p1, p2)

    def test_shape_mismatch(self):
        p = np.zeros((2, 2))
        with pytest.raises(DimensionError):
            ndmath.adam_step(p, np.zeros((2, 3)), ndmath.AdamState.for_param(p))

    def test_sparse_rows_touch_only_rows(self):
        p = np.ones((5, 3))
        st_ = ndmath.AdamState.for_param(p)
        rows = np.array([1, 3])
        ndmath.adam_step_rows(p, rows, np.ones((2, 3)), st_)
        np.testing.assert_array_equal(p[[0, 2, 4]], 1.0)
        assert np.all(p[rows] < 1.0)
        np.testing.assert_array_equal(st_.m[[0, 2, 4]], 0.0)


class TestGradCheck:
    def test_quadratic(self):
        x = np.array([[3.0]])
        err = ndmath.grad_check(lambda p: float(np.sum(p * p)), x, 2 * x)
        assert err < 1e-8

    def test_cross_entropy_gradient(self):
        rng = ndmath.stream_rng(5, "init")
        logits = ndmath.uniform_init(rng, 1, 6)
        gold = 2

        def loss(z):
            return -float(ndmath.log_softmax(z)[0, gold])

        analytic = ndmath.softmax(logits)
        analytic[0, gold] -= 1.0
        assert ndmath.grad_check(loss, logits, analytic) < 1e-9

    def test_wrong_gradient_reports_third(self):
        x = np.array([[3.0]])
        err = ndmath.grad_check(lambda p: float(np.sum(p * p)), x, 4 * x)
        assert err == pytest.approx(1 / 3, abs=1e-6)

    def test_bad_eps(self):
        with pytest.raises(ArgumentError):
            ndmath.grad_check(lambda p: 0.0, np.zeros((1, 1)), np.zeros((1, 1)), eps=0.0)


class TestRngStreams:
    def test_same_seed_same_stream(self):
        a = ndmath.stream_rng(42, "sampler").random(8)
        b = ndmath.stream_rng(42, "sampler").random(8)
        np.testing.assert_array_equal(a, b)

    def test_streams_independent(self):
        a = ndmath.stream_rng(42, "sampler").random(8)
        b = ndmath.stream_rng(42, "dropout").random(8)
        assert not np.array_equal(a, b)

    def test_pcg64_backend(self):
        gen = ndmath.stream_rng(0, "init")
        assert gen.bit_generator.state["bit_generator"] == "PCG64"

    def test_unknown_stream(self):
        with pytest.raises(ArgumentError):
            ndmath.stream_rng(0, "nope")


class TestDropout:
    def test_p_zero_is_ones(self):
        mask = ndmath.dropout_mask(ndmath.stream_rng(0, "dropout"), (4, 4), 0.0)
        np.testing.assert_array_equal(mask, 1.0)

    def test_inverted_scaling(self):
        mask = ndmath.dropout_mask(ndmath.stream_rng(1, "dropout"), (100, 100), 0.3)
        values = np.unique(mask)
        assert set(values.tolist()) <= {0.0, 1.0 / 0.7}
        assert abs(mask.mean() - 1.0) < 0.05


class TestClip:
    def test_noop_below_threshold(self):
        a = np.array([3.0, 4.0])
        norm = ndmath.clip_global_norm([a], 10.0)
        assert norm == pytest.approx(5.0)
        np.testing.assert_array_equal(a, [3.0, 4.0])

    def test_scales_to_max(self):
        a = np.array([3.0, 4.0])
        b = np.array([12.0])
        ndmath.clip_global_norm([a, b], 5.0)
        total = np.sqrt(np.sum(a * a) + np.sum(b * b))
        assert total == pytest.approx(5.0, abs=1e-12)
