import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from errors import ContractViolation
from services.loss import (
    LabelSet,
    loss_constants,
    loss_value,
    node_gradients,
    output_gradient,
)


def _unit_rows(n, d, seed=0):
    y = np.random.default_rng(seed).standard_normal((n, d))
    return y / np.linalg.norm(y, axis=1, keepdims=True)


class TestLossValue:
    def test_regression_at_targets(self):
        y = _unit_rows(6, 2)
        assert loss_value(LabelSet.regression(y), y) == 0.0

    def test_regression_at_zero_with_unit_targets(self):
        y = _unit_rows(6, 3)
        assert loss_value(LabelSet.regression(y), np.zeros((6, 3))) == pytest.approx(0.5, abs=1e-15)

    @pytest.mark.parametrize("classes", [2, 3, 5])
    def test_uniform_logits(self, classes):
        labels = LabelSet.classification(np.arange(7) % classes, num_classes=classes)
        assert loss_value(labels, np.zeros((7, classes))) == pytest.approx(math.log(classes), abs=1e-15)

    def test_classification_is_stable_for_large_logits(self):
        labels = LabelSet.classification(np.array([0, 1]), num_classes=2)
        h = np.array([[1000.0, -1000.0], [1000.0, -1000.0]])
        assert loss_value(labels, h) == pytest.approx(1000.0, rel=1e-12)

    def test_shape_mismatch(self):
        labels = LabelSet.regression(np.zeros((4, 2)))
        with pytest.raises(ContractViolation, match="does not match"):
            loss_value(labels, np.zeros((4, 3)))


class TestOutputGradient:
    def test_regression_at_targets_is_zero(self):
        y = _unit_rows(5, 2)
        np.testing.assert_array_equal(output_gradient(LabelSet.regression(y), y), np.zeros((5, 2)))

    def test_regression_at_zero(self):
        y = _unit_rows(5, 2)
        np.testing.assert_allclose(output_gradient(LabelSet.regression(y), np.zeros((5, 2))), -y / 5)

    def test_classification_uniform_logits(self):
        classes = np.array([0, 2, 1, 2])
        labels = LabelSet.classification(classes, num_classes=3)
        expected = (np.full((4, 3), 1.0 / 3.0) - np.eye(3)[classes]) / 4
        np.testing.assert_allclose(output_gradient(labels, np.zeros((4, 3))), expected, atol=1e-16)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), kind=st.sampled_from(["regression", "classification"]))
    def test_matches_central_differences(self, seed, kind):
        rng = np.random.default_rng(seed)
        n, d = 6, 3
        if kind == "regression":
            labels = LabelSet.regression(_unit_rows(n, d, seed) * 0.9)
        else:
            labels = LabelSet.classification(rng.integers(0, d, size=n), num_classes=d)
        h = rng.standard_normal((n, d)).astype(np.longdouble)
        step = np.longdouble(1e-6)
        numeric = np.zeros((n, d))
        for i, j in np.ndindex(n, d):
            plus, minus = h.copy(), h.copy()
            plus[i, j] += step
            minus[i, j] -= step
            numeric[i, j] = (loss_value(labels, plus) - loss_value(labels, minus)) / (2 * step)
        exact = output_gradient(labels, h.astype(np.float64))
        np.testing.assert_allclose(exact, numeric, rtol=1e-6, atol=1e-10)


class TestLabelSet:
    def test_regression_rejects_long_targets(self):
        with pytest.raises(ContractViolation, match="node 1"):
            LabelSet.regression(np.array([[0.5], [1.5]]))

    def test_regression_accepts_vectors(self):
        labels = LabelSet.regression(np.array([1.0, -1.0, 0.0]))
        assert labels.n == 3
        assert labels.d_out == 1
        assert labels.q == 2

    def test_classification_validation(self):
        with pytest.raises(ContractViolation, match="at least 2 classes"):
            LabelSet.classification(np.zeros(4, dtype=int))
        with pytest.raises(ContractViolation, match="0..1"):
            LabelSet.classification(np.array([0, 2]), num_classes=2)
        with pytest.raises(ContractViolation, match="integer"):
            LabelSet.classification(np.array([0.0, 1.0]))
        assert LabelSet.classification(np.array([0, 1, 1])).q == 1

    def test_mask_shape(self):
        with pytest.raises(ContractViolation, match="mask"):
            LabelSet.regression(np.zeros((3, 1)), mask=[True, False])

    def test_masked_nodes_do_not_contribute(self):
        y = np.array([[1.0], [-1.0], [0.5], [0.0]])
        mask = np.array([True, True, False, False])
        labels = LabelSet.regression(y, mask=mask)
        h = np.ones((4, 1))
        b = output_gradient(labels, h)
        np.testing.assert_array_equal(b[2:], 0.0)
        assert loss_value(labels, h) == pytest.approx((0.0 + 0.5 * 4.0) / 4)

    def test_normalize_by_labeled(self):
        y = np.array([[1.0], [-1.0], [0.5], [0.0]])
        mask = np.array([True, True, False, False])
        labels = LabelSet.regression(y, mask=mask, normalize_by_labeled=True)
        assert labels.denominator == 2
        assert loss_value(labels, np.ones((4, 1))) == pytest.approx(2.0 / 2)


class TestLossConstants:
    def test_regression(self):
        c = loss_constants(LabelSet.regression(np.zeros((2, 1))))
        assert (c.d_l, c.d_l_prime) == (1.0, 1.0)

    @pytest.mark.parametrize("classes,expected", [(3, 4.0), (2, 3.0)])
    def test_classification(self, classes, expected):
        c = loss_constants(LabelSet.classification(np.arange(4) % classes, num_classes=classes))
        assert (c.d_l, c.d_l_prime) == (0.0, expected)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.0, 100.0),
           kind=st.sampled_from(["regression", "classification"]), classes=st.integers(2, 6))
    def test_per_node_gradient_bound(self, seed, scale, kind, classes):
        rng = np.random.default_rng(seed)
        n = 5
        if kind == "regression":
            labels = LabelSet.regression(_unit_rows(n, classes, seed) * rng.uniform(0, 1))
        else:
            labels = LabelSet.classification(rng.integers(0, classes, size=n), num_classes=classes)
        h = rng.standard_normal((n, classes)) * scale
        c = loss_constants(labels)
        grads = np.linalg.norm(node_gradients(labels, h), axis=1)
        assert np.all(grads <= c.d_l * np.linalg.norm(h, axis=1) + c.d_l_prime + 1e-12)
