import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from flowmoe.errors import DegenerateInputError, DimensionError
from flowmoe.tensor import (
    RngState,
    Tensor,
    coefficient_of_variation_sq,
    gather,
    matmul,
    normal_cdf,
    scatter_rows,
    softmax,
    softplus,
    sqrt,
    standard_normal_sample,
    take_rows,
)

from conftest import spaced_logits
from fd import check_gradients


class TestMatmul:
    def test_identity(self):
        a = np.arange(9.0).reshape(3, 3)
        out = matmul(Tensor(np.eye(3)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_hand_case(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradient(self, rng):
        a = rng.normal((3, 4))
        b = rng.normal((4, 2))

        def build():
            ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
            return matmul(ta, tb).sum(), [ta, tb]

        check_gradients(build, [a, b])


class TestArithmetic:
    def test_broadcast_add_grad_sums(self):
        x = Tensor(np.ones((3, 2)), requires_grad=True)
        b = Tensor(np.zeros(2), requires_grad=True)
        (x + b).sum().backward()
        np.testing.assert_array_equal(b.grad, [3.0, 3.0])

    def test_reuse_accumulates(self):
        x = Tensor(2.0, requires_grad=True)
        (x + x).backward()
        assert x.grad == 2.0

    def test_backward_requires_scalar(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros(3), requires_grad=True).backward()

    def test_div_pow_sqrt_gradients(self, rng):
        a = np.abs(rng.normal((4,))) + 0.5
        b = np.abs(rng.normal((4,))) + 0.5

        def build():
            ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
            return (sqrt(ta) / tb + ta ** 3).sum(), [ta, tb]

        check_gradients(build, [a, b])

    def test_reduction_gradients(self, rng):
        x = rng.normal((2, 3, 4))

        def build():
            t = Tensor(x, requires_grad=True)
            return (t.mean(axis=(0, 2), keepdims=True) * 2.0).sum(), [t]

        check_gradients(build, [x])

    def test_reshape_transpose_gradients(self, rng):
        x = rng.normal((3, 4))
        w = rng.normal((3, 4))

        def build():
            t = Tensor(x, requires_grad=True)
            return (t.T.reshape(2, 6) * Tensor(w.T.reshape(2, 6))).sum(), [t]

        check_gradients(build, [x])


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(
            softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)

    def test_masked_entry_exact_zero(self):
        out = softmax(Tensor([3.0, -np.inf, 2.0])).data
        np.testing.assert_allclose(out, [0.731059, 0.0, 0.268941], atol=1e-6)
        assert out[1] == 0.0

    def test_all_masked_raises(self):
        with pytest.raises(DegenerateInputError):
            softmax(Tensor([-np.inf, -np.inf]))

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8),
           st.floats(-100, 100))
    @settings(max_examples=60, deadline=None)
    def test_shift_invariance(self, values, shift):
        base = softmax(Tensor(values)).data
        shifted = softmax(Tensor(np.asarray(values) + shift)).data
        np.testing.assert_allclose(base, shifted, atol=1e-12)

    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=10),
           st.data())
    @settings(max_examples=60, deadline=None)
    def test_probability_vector_with_masking(self, values, data):
        values = np.asarray(values)
        n_masked = data.draw(st.integers(0, len(values) - 1))
        masked = values.copy()
        masked[:n_masked] = -np.inf
        out = softmax(Tensor(masked)).data
        assert np.all(out >= 0)
        assert abs(out.sum() - 1.0) <= 1e-9
        assert np.all(out[:n_masked] == 0.0)

    def test_gradient(self, rng):
        x = spaced_logits(rng, (3, 5))
        w = rng.normal((3, 5))

        def build():
            t = Tensor(x, requires_grad=True)
            return (softmax(t, axis=1) * Tensor(w)).sum(), [t]

        check_gradients(build, [x])


class TestSoftplus:
    def test_zero(self):
        assert softplus(Tensor(0.0)).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_large_positive_stable(self):
        # oracle: the stable form x + log1p(exp(-x))
        assert softplus(Tensor(30.0)).item() == pytest.approx(
            30.0 + math.log1p(math.exp(-30.0)), abs=1e-9)
        assert abs(softplus(Tensor(30.0)).item() - 30.0) < 1e-9

    def test_large_negative_positive_output(self):
        value = softplus(Tensor(-30.0)).item()
        assert value > 0.0
        assert value == pytest.approx(math.log1p(math.exp(-30.0)), rel=1e-9)
        assert value == pytest.approx(9.36e-14, rel=1e-2)

    def test_gradient(self, rng):
        x = rng.normal((6,))

        def build():
            t = Tensor(x, requires_grad=True)
            return softplus(t).sum(), [t]

        check_gradients(build, [x])


class TestNormalCdf:
    def test_symmetry(self):
        assert normal_cdf(Tensor(0.0)).item() == pytest.approx(0.5, abs=1e-15)
        for z in (0.3, 1.1, 2.7):
            assert normal_cdf(Tensor(-z)).item() == pytest.approx(
                1.0 - normal_cdf(Tensor(z)).item(), abs=1e-12)

    def test_against_quadrature(self):
        density = lambda t: math.exp(-0.5 * t * t) / math.sqrt(2 * math.pi)
        for z in (-2.5, -1.0, 0.0, 0.5, 1.96, 3.0):
            expected = 0.5 + quad(density, 0.0, z)[0]
            assert normal_cdf(Tensor(z)).item() == pytest.approx(expected, abs=1e-7)
        assert normal_cdf(Tensor(1.96)).item() == pytest.approx(0.975002, abs=1e-5)

    def test_gradient(self, rng):
        x = rng.normal((5,))

        def build():
            t = Tensor(x, requires_grad=True)
            return normal_cdf(t).sum(), [t]

        check_gradients(build, [x])


class TestCoefficientOfVariationSq:
    @given(st.floats(0.01, 1e6), st.integers(2, 12))
    @settings(max_examples=40, deadline=None)
    def test_constant_vector_is_zero(self, c, n):
        # zero up to the rounding of the mean, relative ~eps, squared
        assert coefficient_of_variation_sq(Tensor(np.full(n, c))).item() <= 1e-30

    def test_hand_values(self):
        assert coefficient_of_variation_sq(Tensor([1.0, 3.0])).item() == \
            pytest.approx(0.25, abs=1e-9)
        for big in (1.0, 7.0, 1e3):
            assert coefficient_of_variation_sq(Tensor([big, 0.0])).item() == \
                pytest.approx(1.0, abs=1e-9)

    def test_permutation_invariance(self, rng):
        v = np.abs(rng.normal((8,))) + 0.1
        base = coefficient_of_variation_sq(Tensor(v)).item()
        shuffled = coefficient_of_variation_sq(Tensor(v[rng.permutation(8)])).item()
        assert base == pytest.approx(shuffled, rel=1e-12)

    def test_differentiable_at_constant(self):
        t = Tensor(np.full(4, 2.0), requires_grad=True)
        coefficient_of_variation_sq(t).backward()
        assert np.all(np.isfinite(t.grad))

    def test_gradient(self, rng):
        v = np.abs(rng.normal((6,))) + 0.2

        def build():
            t = Tensor(v, requires_grad=True)
            return coefficient_of_variation_sq(t), [t]

        check_gradients(build, [v])


class TestSampling:
    def test_same_seed_identical(self):
        a = standard_normal_sample(RngState(42), (4, 5))
        b = standard_normal_sample(RngState(42), (4, 5))
        np.testing.assert_array_equal(a.data, b.data)

    def test_moments(self):
        samples = standard_normal_sample(RngState(7), (1_000_000,)).data
        assert abs(samples.mean()) < 0.01
        assert abs(samples.std() - 1.0) < 0.01

    def test_shape(self):
        assert standard_normal_sample(RngState(0), (2, 3)).data.shape == (2, 3)

    def test_stream_is_bit_exact(self):
        first = RngState(99).normal((10,))
        second = RngState(99).normal((10,))
        assert first.tobytes() == second.tobytes()


class TestIndexedOps:
    def test_take_rows_gradient(self, rng):
        x = rng.normal((5, 3))
        idx = np.array([0, 2, 2, 4])

        def build():
            t = Tensor(x, requires_grad=True)
            return (take_rows(t, idx) * 2.0).sum(), [t]

        check_gradients(build, [x])

    def test_gather_gradient_with_duplicates(self, rng):
        x = rng.normal((4, 6))
        rows = np.array([0, 0, 1, 3])
        cols = np.array([2, 2, 5, 0])

        def build():
            t = Tensor(x, requires_grad=True)
            return (gather(t, rows, cols) ** 2).sum(), [t]

        check_gradients(build, [x])

    def test_scatter_rows_roundtrip(self, rng):
        values = rng.normal((3, 2))

        def build():
            t = Tensor(values, requires_grad=True)
            return scatter_rows(t, np.array([4, 0, 2]), 6).sum(), [t]

        check_gradients(build, [values])
