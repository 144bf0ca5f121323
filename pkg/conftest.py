import os

import numpy as np
import pytest
from hypothesis import settings

from models import CsbmParams
from services.graph import Graph, build_propagation, csbm_generate, ring_with_chords
from services.loss import LabelSet
from services.model import build_model

SMALL_CSBM = CsbmParams(n=120, p_in=0.2, p_out=0.04, d=4)

# HYPOTHESIS_PROFILE=ci replays the same examples on every run
settings.register_profile("ci", derandomize=True, print_blob=True)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def path3():
    return Graph.from_pairs(3, [(0, 1), (1, 2)])


@pytest.fixture
def triangle():
    return Graph.from_pairs(3, [(0, 1), (1, 2), (0, 2)])


@pytest.fixture
def two_edges():
    return Graph.from_pairs(4, [(0, 1), (2, 3)])


@pytest.fixture
def ring12():
    return build_propagation(ring_with_chords(12))


@pytest.fixture(scope="session")
def small_csbm():
    """A connected CSBM draw small enough for per-test forward passes."""
    sample = csbm_generate(SMALL_CSBM, seed=0)
    return sample, build_propagation(sample.graph)


@pytest.fixture(scope="session")
def default_csbm():
    sample = csbm_generate(CsbmParams(), seed=0)
    return sample, build_propagation(sample.graph)


@pytest.fixture
def make_instance(ring12):
    """Random GNN on the 12-node ring with Gaussian features and matching labels."""

    def make(depth=3, width=4, d=3, activation="centered_softplus", task="regression", seed=0,
             target_spectral_norm=None, propagation=None):
        prop = propagation if propagation is not None else ring12
        n = prop.n
        rng = np.random.default_rng(seed + 1000)
        x0 = rng.standard_normal((n, d))
        if task == "regression":
            y = rng.uniform(-1.0, 1.0, size=(n, 2))
            y /= np.maximum(np.linalg.norm(y, axis=1, keepdims=True), 1.0)
            labels = LabelSet.regression(y)
        else:
            labels = LabelSet.classification(rng.integers(0, 3, size=n), num_classes=3)
        model = build_model(d, width, depth, labels.d_out, prop, activation=activation,
                            target_spectral_norm=target_spectral_norm, seed=seed)
        return model, x0, labels

    return make
