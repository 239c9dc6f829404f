import numpy as np
import pytest

from adura import tensor as T
from adura.gradcheck import (
    GradCheck,
    default_checks,
    format_results,
    numeric_grad,
    relative_error,
    run_check,
    run_checks,
)


def _wrong_square(x):
    # forward x**2 but backward returns g*x instead of 2*g*x
    return T.make_node(x.data**2, (x,), lambda g: (g * x.data,), "bad_square")


def _bad_check():
    def build(rng):
        x = T.Tensor(rng.uniform(0.5, 2.0, size=(3,)), requires_grad=True)
        return (lambda: _wrong_square(x)), [x]

    return GradCheck("bad_square", build)


def _good_check():
    def build(rng):
        x = T.Tensor(rng.uniform(0.5, 2.0, size=(3,)), requires_grad=True)
        return (lambda: x * x), [x]

    return GradCheck("square", build)


class TestHarnessSanity:
    def test_corrupted_adjoint_is_reported(self):
        res = run_check(_bad_check())
        assert not res.passed
        # the analytic gradient is half the true one
        np.testing.assert_allclose(res.rel_error, 0.5, rtol=1e-6)

    def test_correct_adjoint_passes(self):
        res = run_check(_good_check())
        assert res.passed
        assert res.rel_error < 1e-8

    def test_failure_appears_in_table(self):
        text = format_results(run_checks([_good_check(), _bad_check()]))
        rows = text.strip().splitlines()
        assert rows[0] == "check,values,rel_error,status"
        assert rows[1].startswith("square,3,") and rows[1].endswith(",pass")
        assert rows[2].startswith("bad_square,3,") and rows[2].endswith(",FAIL")

    def test_numeric_grad_of_cubic(self):
        x = T.Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        g = numeric_grad(lambda: T.sum_(x * x * x), x)
        np.testing.assert_allclose(g, 3 * x.data**2, rtol=1e-8)

    def test_numeric_grad_restores_input(self):
        data = np.array([0.1, 0.2, 0.3])
        x = T.Tensor(data.copy(), requires_grad=True)
        numeric_grad(lambda: T.sum_(T.exp(x)), x)
        np.testing.assert_array_equal(x.data, data)


class TestRelativeError:
    def test_identical_is_zero(self):
        a = np.arange(4.0)
        assert relative_error(a, a) == 0.0

    def test_scale(self):
        np.testing.assert_allclose(relative_error(np.array([2.0]), np.array([1.0])), 0.5)

    def test_zero_gradients_use_floor(self):
        # both near zero: the floor keeps the ratio at the noise level
        assert relative_error(np.array([1e-12]), np.zeros(1)) == pytest.approx(1e-6)


class TestRegistry:
    def test_covers_every_layer_and_loss(self):
        names = {c.name for c in default_checks()}
        for required in (
            "conv2d",
            "deform_conv2d",
            "deformable_block",
            "dense_block",
            "dual_head",
            "batch_norm",
            "masked_bce",
            "dirichlet_loss",
            "orthogonality_loss",
            "offset_loss",
            "total_loss",
        ):
            assert required in names

    def test_names_unique(self):
        names = [c.name for c in default_checks()]
        assert len(names) == len(set(names))

    def test_table_lists_every_name(self):
        checks = [c for c in default_checks() if c.name in ("add", "relu", "masked_bce")]
        text = format_results(run_checks(checks))
        listed = [row.split(",")[0] for row in text.strip().splitlines()[1:]]
        assert listed == ["add", "relu", "masked_bce"]

    @pytest.mark.parametrize("name", ["conv2d", "deform_conv2d", "batch_norm", "dirichlet_loss", "total_loss"])
    def test_selected_checks_pass(self, name):
        (check,) = [c for c in default_checks() if c.name == name]
        res = run_check(check, seed=3)
        assert res.passed, res
