import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from errors import ContractViolation
from services.backprop import BackwardTrace, backward
from services.constructions import constant_gradient_gnn
from services.graph import build_propagation, ring_with_chords
from services.loss import LabelSet
from services.metrics import (
    energy,
    energy_pairwise,
    epsilon_n,
    fit_decay_rate,
    profile,
    stationarity,
    usable_fit_range,
)
from services.model import Activation, build_model, forward
from services.numkit import norm_2inf, spectral_norm

RING12 = build_propagation(ring_with_chords(12))


class TestEnergy:
    def test_constant_rows(self):
        x = np.outer(np.ones(7), np.array([1.0, -2.0, 3.0]))
        assert energy(x) == pytest.approx(0.0, abs=1e-15)

    def test_two_rows(self):
        x = np.array([[1.0, 0.0], [0.0, 0.0]])
        assert energy(x) == pytest.approx(0.5, abs=1e-15)
        assert energy_pairwise(x) == pytest.approx(0.5, abs=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 50), d=st.integers(1, 6))
    def test_projector_form_equals_pairwise_sum(self, seed, n, d):
        x = np.random.default_rng(seed).standard_normal((n, d))
        assert energy(x) == pytest.approx(energy_pairwise(x), abs=1e-10)

    def test_shift_invariance_and_scaling(self):
        x = np.random.default_rng(1).standard_normal((9, 3))
        assert energy(x + np.array([5.0, -1.0, 2.0])) == pytest.approx(energy(x), rel=1e-12)
        assert energy(-3.0 * x) == pytest.approx(3.0 * energy(x), rel=1e-12)

    def test_vectors_are_single_columns(self):
        assert energy(np.array([1.0, -1.0])) == pytest.approx(1.0)


class TestEpsilonN:
    def test_zero_column_sums(self):
        b = np.array([[1.0, -2.0], [-1.0, 2.0]])
        assert epsilon_n(b) == 0.0

    def test_column_sum_norm(self):
        assert epsilon_n(np.array([[3.0, 0.0], [0.0, 4.0]])) == pytest.approx(5.0)


class TestFitDecayRate:
    def test_geometric_series(self):
        series = [2.0 * 0.5 ** k for k in range(11)]
        fit = fit_decay_rate(series, 0, 10)
        assert fit.rate == pytest.approx(0.5, abs=1e-10)
        assert fit.r_squared == pytest.approx(1.0, abs=1e-10)
        assert math.exp(fit.intercept) == pytest.approx(2.0, rel=1e-10)

    def test_constant_series(self):
        fit = fit_decay_rate([3.0] * 8, 1, 6)
        assert fit.rate == pytest.approx(1.0, abs=1e-12)
        assert fit.r_squared == 1.0

    def test_rejects_nonpositive_values(self):
        with pytest.raises(ContractViolation, match="k=3"):
            fit_decay_rate([1.0, 0.5, 0.25, 0.0, 0.1], 0, 4)

    def test_names_the_first_non_finite_value(self):
        with pytest.raises(ContractViolation, match="k=2"):
            fit_decay_rate([1.0, 0.5, float("inf"), 0.1, 0.05], 0, 4)
        with pytest.raises(ContractViolation, match="k=1"):
            fit_decay_rate([1.0, float("nan"), 0.25, 0.1, 0.05], 0, 4)

    def test_rejects_short_or_bad_ranges(self):
        with pytest.raises(ContractViolation, match="at least 4 points"):
            fit_decay_rate([1.0] * 10, 2, 4)
        with pytest.raises(ContractViolation, match="outside"):
            fit_decay_rate([1.0] * 5, 0, 5)

    def test_usable_range_stops_at_the_floor(self):
        series = [1.0, 0.5, 0.25, 0.125, 0.0625, 1e-320, 1e-330]
        assert usable_fit_range(series, 0, 6) == (0, 4)
        assert usable_fit_range(series, 3, 6) is None

    def test_identity_gnn_decays_at_lambda(self, small_csbm):
        sample, prop = small_csbm
        model = build_model(sample.features.shape[1], 4, 12, 2, prop, activation="identity",
                            scheme="orthogonal", target_spectral_norm=1.0, seed=2)
        trace = forward(model, sample.features)
        forward_energy = [energy(f) for f in trace.f]
        fit = fit_decay_rate(forward_energy, 2, 10)
        assert fit.rate <= prop.lam + 0.05


class TestContractions:
    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), d=st.integers(1, 5))
    def test_propagation_shrinks_energy_by_lambda(self, seed, d):
        x = np.random.default_rng(seed).standard_normal((12, d))
        assert energy(RING12.p @ x) <= RING12.lam * energy(x) + 1e-12

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), d=st.integers(1, 5))
    def test_propagation_never_grows_row_norms(self, seed, d):
        x = np.random.default_rng(seed).standard_normal((12, d))
        assert norm_2inf(RING12.p @ x) <= norm_2inf(x) + 1e-12

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 20), d=st.integers(1, 5), m=st.integers(1, 5))
    def test_weights_scale_by_their_spectral_norm(self, seed, n, d, m):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((n, d))
        w = rng.standard_normal((d, m))
        s = spectral_norm(w)
        assert norm_2inf(x @ w) <= s * norm_2inf(x) * (1 + 1e-12) + 1e-12
        assert energy(x @ w) <= s * energy(x) * (1 + 1e-12) + 1e-12

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 20.0),
           kind=st.sampled_from(["tanh", "centered_softplus", "relu"]))
    def test_activations_never_grow_energy(self, seed, scale, kind):
        x = scale * np.random.default_rng(seed).standard_normal((15, 3))
        assert energy(Activation(kind).apply(x)) <= energy(x) * (1 + 1e-12) + 1e-12


class TestProfile:
    def test_constant_gradient_construction(self):
        c = constant_gradient_gnn(10, 8)
        trace = forward(c.model, c.x0)
        report = profile(c.model, trace, backward(c.model, trace, c.labels), c.labels)
        assert report.depth == 8
        np.testing.assert_allclose(report.forward_energy, 0.0, atol=1e-12)
        np.testing.assert_allclose(report.backward_energy, 0.0, atol=1e-12)
        np.testing.assert_allclose(report.grad_norms, 1.0, atol=1e-12)
        assert report.spectral_norms == [1.0] * 9

    def test_random_model(self, small_csbm):
        sample, prop = small_csbm
        labels = LabelSet.classification(sample.labels, num_classes=2)
        model = build_model(sample.features.shape[1], 8, 10, 2, prop, seed=1)
        trace = forward(model, sample.features)
        report = profile(model, trace, backward(model, trace, labels), labels)
        assert len(report.backward_energy) == 11
        assert report.loss > 0
        fit = report.fitted_rates["forward_energy"]
        assert (fit.k_lo, fit.k_hi) == (2, 8)
        assert fit.rate < 1.0

    def test_depth_mismatch(self, make_instance):
        model, x0, labels = make_instance(depth=3)
        other, _, _ = make_instance(depth=4)
        trace = forward(model, x0)
        with pytest.raises(ContractViolation, match="depths differ"):
            profile(other, trace, backward(model, trace, labels), labels)


class TestStationarity:
    def test_zero_gradients_are_globally_stationary(self):
        btrace = BackwardTrace(b=[np.zeros((3, 1))] * 3, grads=[np.zeros((1, 1))] * 3)
        report = stationarity(btrace, 1e-9)
        assert report.is_global
        assert report.max_grad_norm == 0.0

    def test_constant_gradient_construction_is_not_stationary(self):
        c = constant_gradient_gnn(12, 5)
        btrace = backward(c.model, forward(c.model, c.x0), c.labels)
        report = stationarity(btrace, 0.5)
        assert not report.is_global
        assert report.per_layer == [False] * 6
        assert report.max_grad_norm == pytest.approx(1.0, abs=1e-12)

    def test_delta_must_be_positive(self):
        btrace = BackwardTrace(b=[np.zeros((3, 1))], grads=[np.zeros((1, 1))])
        with pytest.raises(ContractViolation):
            stationarity(btrace, 0.0)
