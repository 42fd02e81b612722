"""
Tests for finite-difference gradient verification
"""

import unittest

import numpy as np

from feddpg.generator import GeneratorParams
from feddpg.gradcheck import (
    DEFAULT_TOLERANCE,
    check_gradients,
    gradient_check_report,
    numerical_gradient,
    relative_error,
)
from feddpg.tensor import Tensor, add, mul, tanh, tensor_sum


class TestNumericalGradient(unittest.TestCase):
    """Central differences"""

    def test_quadratic(self):
        x = np.array([[1.0, -2.0], [0.5, 3.0]])
        grad = numerical_gradient(lambda: float(np.sum(x**2)), x)
        np.testing.assert_allclose(grad, 2 * x, rtol=1e-6)

    def test_array_restored(self):
        x = np.array([0.1, 0.2, 0.3])
        original = x.copy()
        numerical_gradient(lambda: float(np.prod(x)), x)
        self.assertTrue(np.array_equal(x, original))

    def test_relative_error_floor(self):
        err = relative_error(np.array([0.0, 2.0]), np.array([1e-9, 1.0]))
        np.testing.assert_allclose(err, [1e-4, 0.5])


class TestCheckGradients(unittest.TestCase):
    """Analytic against numeric gradients"""

    def setUp(self):
        rng = np.random.default_rng(0)
        self.params = GeneratorParams.from_arrays(
            {"w": rng.normal(size=(3, 2)), "b": rng.normal(size=2)}
        )

    def test_correct_gradient_passes(self):
        def loss(p):
            return tensor_sum(mul(tanh(add(p["w"], p["b"])), p["w"]))

        before = self.params.copy()
        result = check_gradients(loss, self.params)
        self.assertTrue(result.passed())
        self.assertEqual(result.num_checked, 8)
        self.assertTrue(self.params.bit_equal(before))
        self.assertTrue(all(t.grad is None for t in self.params))

    def test_missing_gradient_is_caught(self):
        def loss(p):
            detached = Tensor(float(np.sum(p["w"].data ** 2)))
            return add(tensor_sum(p["w"]), detached)

        result = check_gradients(loss, self.params)
        self.assertFalse(result.passed())
        self.assertEqual(result.worst_entry[0], "w")
        self.assertEqual(result.per_tensor["b"], 0.0)


class TestGradientCheckReport(unittest.TestCase):
    """Both training objectives on the small model"""

    def test_report_within_tolerance(self):
        report = gradient_check_report(seed=0)
        self.assertEqual(set(report), {"local_loss", "unlearning_loss"})
        for name, result in report.items():
            self.assertLessEqual(result.max_rel_error, DEFAULT_TOLERANCE, name)
            self.assertGreater(result.num_checked, 0)
            self.assertIn("max_rel_error", result.to_dict())

    def test_without_forget_term(self):
        report = gradient_check_report(seed=1, reg_lambda=0.0)
        self.assertTrue(report["unlearning_loss"].passed())


if __name__ == "__main__":
    unittest.main()
