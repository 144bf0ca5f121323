import numpy as np
import pytest

from errors import ContractViolation
from services.backprop import gradients
from services.constructions import (
    constant_gradient_gnn,
    mlp_counterexample,
    rademacher_labels,
    spurious_stationary_gnn,
)
from services.graph import build_propagation, ring_with_chords
from services.loss import LabelSet
from services.metrics import stationarity
from services.model import build_model


class TestConstantGradient:
    @pytest.mark.parametrize("n,depth", [(20, 10), (100, 40)])
    def test_every_gradient_is_one(self, n, depth):
        c = constant_gradient_gnn(n, depth)
        report = c.report
        assert report.all_hold, [claim for claim in report.claims if not claim.holds]
        assert len(report.grad_norms) == depth + 1
        np.testing.assert_allclose(report.grad_norms, 1.0, atol=1e-12)
        np.testing.assert_allclose(report.backward_energy, 0.0, atol=1e-12)

    def test_on_a_seeded_csbm_graph(self):
        c = constant_gradient_gnn(60, 8, seed=1)
        assert c.model.propagation.n == c.report.n
        assert c.report.all_hold

    def test_on_a_supplied_graph(self, ring12):
        c = constant_gradient_gnn(12, 3, propagation=ring12)
        assert c.model.propagation is ring12
        assert c.report.all_hold

    def test_invalid_arguments(self):
        with pytest.raises(ContractViolation):
            constant_gradient_gnn(1, 3)
        with pytest.raises(ContractViolation):
            constant_gradient_gnn(10, 0)
        with pytest.raises(ContractViolation, match="even n"):
            constant_gradient_gnn(11, 3, seed=0)


class TestRademacherLabels:
    def test_balanced_labels_are_centered(self):
        labels = rademacher_labels(40, seed=3, balanced=True)
        assert labels.targets.sum() == 0.0
        assert set(np.unique(labels.targets)) == {-1.0, 1.0}

    def test_odd_count_gets_one_zero(self):
        y = rademacher_labels(41, seed=3, balanced=True).targets.ravel()
        assert y.sum() == 0.0
        assert np.count_nonzero(y == 0.0) == 1

    def test_seeded(self):
        a = rademacher_labels(30, seed=5).targets
        b = rademacher_labels(30, seed=5).targets
        np.testing.assert_array_equal(a, b)
        assert set(np.unique(a)) <= {-1.0, 1.0}
        assert rademacher_labels(30, seed=5).kind == "regression"

    def test_invalid_count(self):
        with pytest.raises(ContractViolation):
            rademacher_labels(0, seed=0)


class TestSpuriousStationary:
    def _base(self, prop, depth, seed=0):
        return build_model(3, 6, depth, 1, prop, activation="centered_softplus", target_spectral_norm=1.0,
                           seed=seed)

    def test_only_the_last_layer_moves(self, ring12):
        x0 = np.random.default_rng(0).standard_normal((12, 3))
        labels = rademacher_labels(12, seed=0, balanced=True)
        c = spurious_stationary_gnn(self._base(ring12, 4), x0, labels)
        assert c.report.all_hold
        assert c.report.warnings == []
        assert c.report.grad_norms[:4] == [0.0] * 4
        np.testing.assert_array_equal(c.model.weights[-1], 0.0)

    def test_keeps_the_other_weights(self, ring12):
        base = self._base(ring12, 3)
        x0 = np.random.default_rng(1).standard_normal((12, 3))
        c = spurious_stationary_gnn(base, x0, rademacher_labels(12, seed=1, balanced=True))
        for a, b in zip(base.weights[:-1], c.model.weights[:-1]):
            np.testing.assert_array_equal(a, b)
        assert np.any(base.weights[-1] != 0)

    def test_loss_is_the_label_energy(self, ring12):
        x0 = np.random.default_rng(2).standard_normal((12, 3))
        labels = rademacher_labels(12, seed=2, balanced=True)
        c = spurious_stationary_gnn(self._base(ring12, 2), x0, labels)
        loss = next(claim for claim in c.report.claims if claim.name == "loss")
        assert loss.claimed == pytest.approx(0.5)
        assert loss.holds

    def test_uncentered_labels_warn(self, ring12):
        x0 = np.random.default_rng(3).standard_normal((12, 3))
        labels = LabelSet.regression(np.ones((12, 1)))
        c = spurious_stationary_gnn(self._base(ring12, 2), x0, labels)
        assert len(c.report.warnings) == 1
        assert "not centered" in c.report.warnings[0]

    def test_rejects_classification(self, ring12):
        labels = LabelSet.classification(np.arange(12) % 2)
        with pytest.raises(ContractViolation, match="regression"):
            spurious_stationary_gnn(self._base(ring12, 2), np.zeros((12, 3)), labels)

    @pytest.mark.slow
    def test_gradient_shrinks_with_depth(self, default_csbm):
        sample, prop = default_csbm
        n = sample.graph.n
        labels = rademacher_labels(n, seed=0, balanced=True)
        label_loss = float((labels.targets ** 2).sum()) / (2 * n)
        largest = []
        for depth in (5, 10, 20, 40):
            base = build_model(sample.features.shape[1], 16, depth, 1, prop, target_spectral_norm=1.0, seed=0)
            c = spurious_stationary_gnn(base, sample.features, labels)
            loss = next(claim for claim in c.report.claims if claim.name == "loss")
            assert abs(loss.measured - label_loss) <= 1e-12
            largest.append(max(c.report.grad_norms))
        assert all(b < a for a, b in zip(largest, largest[1:]))
        assert stationarity(gradients(c.model, sample.features, labels), largest[-1] * 1.01).is_global


class TestMlpCounterexample:
    @pytest.mark.parametrize("seed", range(10))
    def test_exact_gradients(self, seed):
        depth, k_zero = 6, 3
        c = mlp_counterexample(20, depth, k_zero, seed)
        assert c.model.is_mlp
        assert c.report.all_hold
        grads = gradients(c.model, c.x0, c.labels).grads
        assert grads[depth][0, 0] == 0.0
        assert grads[k_zero][0, 0] == pytest.approx(-1.0, abs=1e-12)
        for k in range(depth + 1):
            if k != k_zero:
                assert grads[k][0, 0] == 0.0

    def test_data_is_on_the_diagonal(self):
        c = mlp_counterexample(15, 3, 0, seed=4)
        np.testing.assert_array_equal(c.x0, c.labels.targets)
        assert set(np.unique(c.x0)) <= {-1.0, 1.0}

    def test_graph_contrast(self):
        prop = build_propagation(ring_with_chords(20))
        c = mlp_counterexample(20, 5, 2, seed=0, propagation=prop)
        contrast = c.report.contrast_grad_norms
        assert len(contrast) == 6
        assert contrast[5] == 0.0
        assert contrast[2] < 1.0
        assert c.report.all_hold

    def test_invalid_arguments(self, ring12):
        with pytest.raises(ContractViolation, match="k_zero"):
            mlp_counterexample(10, 3, 3, seed=0)
        with pytest.raises(ContractViolation):
            mlp_counterexample(0, 3, 1, seed=0)
        with pytest.raises(ContractViolation, match="propagation"):
            mlp_counterexample(10, 3, 1, seed=0, propagation=ring12)
