import numpy as np
import pytest

from vesselseg import ops
from vesselseg.checks import GROUPS, geo_dead_bias_gradient, run_suite
from vesselseg.gradcheck import grad_check, relative_error
from vesselseg.tensor import Tensor


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


class TestGradCheck:
    def test_linear_random(self):
        rng = np.random.default_rng(0)
        rep = grad_check(ops.linear, [t64(rng.standard_normal((3, 3))), t64(rng.standard_normal((3, 3)))])
        assert rep.max_rel_error <= 1e-6

    def test_conv_small(self):
        rng = np.random.default_rng(1)
        rep = grad_check(ops.conv3d, [t64(rng.standard_normal((1, 1, 2, 3, 3))),
                                      t64(rng.standard_normal((1, 1, 1, 3, 3)))])
        assert rep.max_rel_error <= 1e-6

    def test_constant_function_is_exact(self):
        x = t64(np.ones(4))
        rep = grad_check(lambda a: ops.scale(ops.sum(a), 0.0), [x])
        assert rep.max_rel_error == 0.0 and rep.passed

    def test_rejects_float32(self):
        with pytest.raises(TypeError):
            grad_check(ops.exp, [Tensor(np.ones(2, dtype=np.float32))])

    def test_kinks_are_skipped(self):
        # relu exactly at 0 has one-sided slopes 0 and 1
        rep = grad_check(ops.relu, [t64([0.0, 1.0, -1.0])])
        assert rep.skipped == 1 and rep.checked == 2 and rep.passed

    def test_detects_wrong_gradient(self):
        class Bad(ops.Function):
            def forward(self, x):
                return x * x

            def backward(self, g):
                return (g * 3.0,)

        rep = grad_check(lambda x: Bad.apply(x), [t64([0.3, 0.7])])
        assert not rep.passed

    def test_relative_error_denominator(self):
        assert relative_error(0.0, 0.0) == 0.0
        assert relative_error(1.0, 0.5) == 0.5
        assert relative_error(1e-12, 0.0) == pytest.approx(1e-4)


class TestSuite:
    @pytest.mark.parametrize("group", GROUPS)
    def test_group_passes(self, group):
        results = run_suite((group,))
        assert results and all(r.passed for r in results), [r.line() for r in results if not r.passed]

    def test_unknown_group(self):
        with pytest.raises(ValueError):
            run_suite(("nope",))

    def test_normalised_away_biases_have_zero_gradient(self):
        assert geo_dead_bias_gradient() < 1e-10
