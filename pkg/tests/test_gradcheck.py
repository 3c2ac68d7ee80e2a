import pytest
import numpy as np
from unittest import TestCase
from dynasty import tensor as T
from dynasty.tensor import Tensor
from dynasty.config import ModelConfig
from dynasty.gradcheck import grad_check
from dynasty.model import init_parameters, spatial_attention_layer
from dynasty.exceptions import DynastyConfigError, DynastyDeterminismError


ATTENTION_CONFIG = ModelConfig(
    feature_dim=1,
    hidden_dim=8,
    num_heads=2,
    num_layers=1,
    history_len=1,
    horizon=1,
    bias_mlp_hidden=8,
    bias_mlp_layers=1,
    edge_dropout_rate=0.0,
)


class GradCheckTestCase(TestCase):
    def test_quadratic(self):
        w = Tensor([[0.5, -1.5], [2.0, 1.0]], requires_grad=True, name="w")

        report = grad_check(lambda: T.reduce_sum(T.square(w)), [w])
        self.assertTrue(report.passed)
        self.assertLess(report.max_relative_error, 1e-8)
        np.testing.assert_array_equal(w.grad, 2.0 * w.values)

    def test_attention_layer(self):
        rng = np.random.default_rng(0)
        params = init_parameters(ATTENTION_CONFIG)
        Z = rng.standard_normal((4, 8))
        A = rng.uniform(0.0, 1.0, (4, 4))
        target = rng.standard_normal((4, 8))
        layer = {name: t for name, t in params.items() if name.startswith("layers.0.")}

        def build():
            out = spatial_attention_layer(Z, A, params, ATTENTION_CONFIG)
            return T.reduce_mean(T.absolute(out - target))

        report = grad_check(build, layer, tol=1e-5)
        self.assertTrue(report.passed, report.failed())
        self.assertEqual(
            {check.name for check in report.checks}, set(layer)
        )

    def test_unused_parameter(self):
        used = Tensor([1.0, 2.0], requires_grad=True, name="used")
        unused = Tensor([3.0], requires_grad=True, name="unused")

        report = grad_check(lambda: T.reduce_sum(used), [used, unused])
        self.assertTrue(report.passed)

    def test_wrong_gradient_detected(self):
        w = Tensor([0.3, 0.7], requires_grad=True, name="w")
        stale = Tensor([0.3, 0.7])

        # The loss reads the values through a constant copy, so backward sees no dependency.
        def build():
            stale.values[...] = w.values
            return T.reduce_sum(T.square(stale)) + T.reduce_sum(w) * 0.0

        report = grad_check(build, [w])
        self.assertFalse(report.passed)
        self.assertEqual(report.failed(), ["w"])

    def test_small_missing_gradient_detected(self):
        w = Tensor([0.3, 0.7], requires_grad=True, name="w")
        stale = Tensor([0.3, 0.7])

        def build():
            stale.values[...] = w.values
            return T.reduce_sum(T.square(stale)) * 1e-8 + T.reduce_sum(w) * 0.0

        report = grad_check(build, [w])
        self.assertFalse(report.passed)
        self.assertEqual(report.checks[0].failures, 2)

    def test_small_gradient_passes(self):
        w = Tensor([0.3, 0.7], requires_grad=True, name="w")

        report = grad_check(lambda: T.reduce_sum(T.square(w)) * 1e-8, [w])
        self.assertTrue(report.passed, report.failed())

    def test_roundoff_floor(self):
        w = Tensor([2.0], requires_grad=True)

        report = grad_check(lambda: T.reduce_sum(T.square(w)) * 1e3, [w])
        self.assertTrue(report.passed)
        self.assertEqual(report.roundoff_floor, np.finfo(np.float64).eps * 4000.0 / 1e-6)

        with pytest.raises(DynastyConfigError):
            grad_check(lambda: T.reduce_sum(w), [w], atol=-1.0)

    def test_nondeterministic(self):
        w = Tensor([1.0], requires_grad=True)

        def build():
            noise = np.random.default_rng().standard_normal(1)
            return T.reduce_sum(w * noise)

        with pytest.raises(DynastyDeterminismError):
            grad_check(build, [w])

    def test_step(self):
        w = Tensor([1.0], requires_grad=True)

        with pytest.raises(DynastyConfigError):
            grad_check(lambda: T.reduce_sum(w), [w], step=0.0)
