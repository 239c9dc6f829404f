import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adura.errors import DomainError
from adura.special import digamma, trigamma

EULER_GAMMA = 0.5772156649015329


def _harmonic_limit_gamma(n=10**6):
    # gamma = lim (H_n - ln n); the Euler-Maclaurin tail makes it exact to ~1e-16
    k = np.arange(1, n + 1, dtype=np.float64)
    h = np.sum(1.0 / k[::-1])
    return h - np.log(n) - 1.0 / (2 * n) + 1.0 / (12 * n**2)


class TestDigammaValues:
    def test_at_one_is_minus_euler_gamma(self):
        assert abs(digamma(1.0) - (-_harmonic_limit_gamma())) < 1e-12
        assert abs(digamma(1.0) - (-EULER_GAMMA)) < 1e-15

    def test_unit_step_recurrence_at_one(self):
        assert abs((digamma(2.0) - digamma(1.0)) - 1.0) < 1e-14

    @pytest.mark.parametrize("x", [1e-3, 0.0137, 0.5, 1.5, 3.999, 6.0, 9.99, 10.0, 57.3, 1e3, 1e5, 1e6])
    def test_matches_mpmath(self, x):
        assert abs(digamma(x) - float(mpmath.digamma(x))) < 1e-12

    def test_dense_grid_against_mpmath(self):
        xs = np.geomspace(1e-3, 1e6, 400)
        ref = np.array([float(mpmath.digamma(x)) for x in xs])
        np.testing.assert_allclose(digamma(xs), ref, rtol=0, atol=1e-12)

    def test_vectorised_shape_preserved(self):
        x = np.linspace(0.5, 4, 12).reshape(3, 4)
        assert digamma(x).shape == (3, 4)


class TestTrigamma:
    def test_dense_grid_against_mpmath(self):
        xs = np.geomspace(1e-3, 1e6, 200)
        ref = np.array([float(mpmath.psi(1, x)) for x in xs])
        np.testing.assert_allclose(trigamma(xs), ref, rtol=1e-12)

    def test_is_derivative_of_digamma(self):
        x = np.linspace(0.3, 40, 50)
        h = 1e-5
        fd = (digamma(x + h) - digamma(x - h)) / (2 * h)
        np.testing.assert_allclose(trigamma(x), fd, rtol=1e-7)


class TestRecurrence:
    def test_thousand_random_points(self):
        x = np.random.default_rng(7).uniform(0.5, 100, 1000)
        np.testing.assert_allclose(digamma(x + 1) - digamma(x), 1.0 / x, rtol=0, atol=1e-10)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(min_value=1e-2, max_value=1e4))
    def test_recurrence_property(self, x):
        assert abs(digamma(x + 1) - digamma(x) - 1.0 / x) < 1e-10

    @settings(max_examples=100, deadline=None)
    @given(st.floats(min_value=1e-3, max_value=1e6), st.floats(min_value=1e-3, max_value=1e6))
    def test_strictly_increasing(self, a, b):
        if a < b:
            assert digamma(a) < digamma(b) or b - a < 1e-12 * b


class TestDomain:
    @pytest.mark.parametrize("x", [0.0, -1.0, -0.5, np.nan])
    def test_non_positive_rejected(self, x):
        with pytest.raises(DomainError):
            digamma(x)
        with pytest.raises(DomainError):
            trigamma(x)

    def test_array_with_one_bad_entry_rejected(self):
        with pytest.raises(DomainError):
            digamma(np.array([1.0, 2.0, 0.0]))
