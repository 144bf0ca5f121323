"""Builders for the three exact constructions: constant gradients with zero
backward energy, spurious stationary points, and the MLP contrast."""

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from errors import ContractViolation
from models import ClaimCheck, ConstructionReport, CsbmParams
from services.backprop import gradients
from services.graph import PropagationMatrix, build_propagation, csbm_generate, ring_with_chords
from services.loss import LabelSet, loss_value
from services.metrics import energy
from services.model import Activation, GnnModel, forward
from services.rng import stream

logger = logging.getLogger(__name__)

EXACT_TOL = 1e-12
CENTER_TOL = 1e-10


@dataclass
class Construction:
    model: GnnModel
    x0: np.ndarray
    labels: LabelSet
    report: ConstructionReport


def _scalar_weights(depth: int, zero_at: Optional[int] = None) -> List[np.ndarray]:
    weights = [np.ones((1, 1)) for _ in range(depth + 1)]
    if zero_at is not None:
        weights[zero_at] = np.zeros((1, 1))
    return weights


def rademacher_labels(n: int, seed: int, balanced: bool = False) -> LabelSet:
    """Scalar regression labels in {-1, +1}.

    ``balanced`` draws a random arrangement with equal counts, so the labels
    are exactly centered; for odd n one node gets the label 0.
    """
    if n < 1:
        raise ContractViolation(f"n must be positive, got {n}")
    rng = stream(seed, "labels")
    if balanced:
        half = n // 2
        y = np.concatenate([np.ones(half), -np.ones(half), np.zeros(n - 2 * half)])
        y = rng.permutation(y)
    else:
        y = rng.choice(np.array([-1.0, 1.0]), size=n)
    return LabelSet.regression(y.reshape(-1, 1))


def _default_propagation(n: int, seed: Optional[int]) -> PropagationMatrix:
    if seed is None:
        return build_propagation(ring_with_chords(n))
    if n % 2:
        raise ContractViolation(f"a seeded CSBM graph needs even n, got {n}")
    p_in = min(1.0, max(0.05, 10.0 / n))
    sample = csbm_generate(CsbmParams(n=n, p_in=p_in, p_out=p_in / 5.0), seed)
    return build_propagation(sample.graph)


def constant_gradient_gnn(
    n: int,
    depth: int,
    propagation: Optional[PropagationMatrix] = None,
    seed: Optional[int] = None,
) -> Construction:
    """Width-1 linear GNN with unit weights, constant input and zero labels.

    Every backward signal is the constant vector 1/n, so backward energy is
    zero while every layer gradient equals 1.
    """
    if n < 2 or depth < 1:
        raise ContractViolation(f"need n >= 2 and depth >= 1, got n={n}, depth={depth}")
    prop = propagation if propagation is not None else _default_propagation(n, seed)
    n = prop.n

    model = GnnModel(weights=_scalar_weights(depth), activation=Activation("identity"), propagation=prop, seed=seed)
    x0 = np.ones((n, 1))
    labels = LabelSet.regression(np.zeros((n, 1)))
    trace = forward(model, x0)
    btrace = gradients(model, x0, labels)

    grad_norms = btrace.grad_norms()
    backward_energy = [energy(b) for b in btrace.b]
    claims = [ClaimCheck(name=f"grad_norm[{k}]", claimed=1.0, measured=g, tolerance=EXACT_TOL)
              for k, g in enumerate(grad_norms)]
    claims += [ClaimCheck(name=f"backward_energy[{k}]", claimed=0.0, measured=e, tolerance=EXACT_TOL)
               for k, e in enumerate(backward_energy)]
    claims += [ClaimCheck(name=f"forward_constant[{k}]", claimed=0.0,
                          measured=float(np.max(np.abs(f - 1.0))), tolerance=EXACT_TOL)
               for k, f in enumerate(trace.f)]
    report = ConstructionReport(construction="constant_gradient", n=n, depth=depth, claims=claims,
                                grad_norms=grad_norms, backward_energy=backward_energy)
    return Construction(model=model, x0=x0, labels=labels, report=report)


def spurious_stationary_gnn(
    base_model: GnnModel,
    x0: np.ndarray,
    labels: LabelSet,
    center_tol: float = CENTER_TOL,
) -> Construction:
    """Copy of ``base_model`` with the output weight set to zero.

    The output is identically zero, so the loss equals the label energy and
    every backward signal below the output layer vanishes. The base model's
    other weights are kept.
    """
    if labels.kind != "regression":
        raise ContractViolation("spurious stationary points are built for regression labels")
    warnings = []
    mean = float(np.linalg.norm(labels.targets.mean(axis=0)))
    if mean > center_tol:
        warnings.append(f"labels are not centered: ||mean y|| = {mean:.3e} > {center_tol:.1e}")
        logger.warning("Spurious construction with uncentered labels (||mean y|| = %.3e)", mean)

    weights = [w.copy() for w in base_model.weights]
    weights[-1] = np.zeros_like(weights[-1])
    model = base_model.with_weights(weights)

    trace = forward(model, x0)
    btrace = gradients(model, x0, labels)
    grad_norms = btrace.grad_norms()
    depth = model.depth

    label_loss = float((labels.node_weights() * 0.5 * (labels.targets ** 2).sum(axis=1)).sum())
    last_expected = float(np.linalg.norm(trace.f[depth].T @ (-labels.node_weights()[:, None] * labels.targets)))
    claims = [
        ClaimCheck(name="loss", claimed=label_loss, measured=float(loss_value(labels, trace.output)),
                   tolerance=EXACT_TOL),
        ClaimCheck(name=f"grad_norm[{depth}]", claimed=last_expected, measured=grad_norms[depth],
                   tolerance=EXACT_TOL),
    ]
    claims += [ClaimCheck(name=f"grad_norm[{k}]", claimed=0.0, measured=g, tolerance=EXACT_TOL)
               for k, g in enumerate(grad_norms[:depth])]
    report = ConstructionReport(construction="spurious_stationary", n=x0.shape[0], depth=depth, claims=claims,
                                grad_norms=grad_norms, backward_energy=[energy(b) for b in btrace.b],
                                warnings=warnings)
    return Construction(model=model, x0=np.asarray(x0, dtype=np.float64), labels=labels, report=report)


def mlp_counterexample(
    n: int,
    depth: int,
    k_zero: int,
    seed: int,
    propagation: Optional[PropagationMatrix] = None,
) -> Construction:
    """Width-1 linear MLP with W^(k_zero) = 0 on data (x, y) = +-(1, 1).

    The output weight gradient is zero, yet the zeroed layer's gradient is
    -(1/n) sum x_i y_i = -1. Passing ``propagation`` also runs the same
    weights as a GNN and records its gradients next to the MLP's.
    """
    if not 0 <= k_zero < depth:
        raise ContractViolation(f"k_zero must lie in 0..{depth - 1}, got {k_zero}")
    if n < 1:
        raise ContractViolation(f"n must be positive, got {n}")
    if propagation is not None and propagation.n != n:
        raise ContractViolation(f"propagation is {propagation.n}x{propagation.n} but n = {n}")

    signs = stream(seed, "mlp-data").choice(np.array([-1.0, 1.0]), size=n)
    x0 = signs.reshape(-1, 1)
    labels = LabelSet.regression(x0.copy())

    model = GnnModel(weights=_scalar_weights(depth, zero_at=k_zero), activation=Activation("identity"),
                     propagation=None, seed=seed)
    btrace = gradients(model, x0, labels)
    grads = [float(g[0, 0]) for g in btrace.grads]
    expected = [-1.0 if k == k_zero else 0.0 for k in range(depth + 1)]
    claims = [ClaimCheck(name=f"grad[{k}]", claimed=e, measured=g, tolerance=EXACT_TOL)
              for k, (e, g) in enumerate(zip(expected, grads))]

    contrast = None
    if propagation is not None:
        gnn = GnnModel(weights=_scalar_weights(depth, zero_at=k_zero), activation=Activation("identity"),
                       propagation=propagation, seed=seed)
        contrast = gradients(gnn, x0, labels).grad_norms()
        claims.append(ClaimCheck(name=f"gnn_grad[{depth}]", claimed=0.0, measured=contrast[depth],
                                 tolerance=EXACT_TOL))
        logger.info("MLP vs GNN gradient at layer %d: %.6g vs %.6g", k_zero, abs(grads[k_zero]), contrast[k_zero])

    report = ConstructionReport(construction="mlp_counterexample", n=n, depth=depth, claims=claims,
                                grad_norms=[abs(g) for g in grads],
                                backward_energy=[energy(b) for b in btrace.b],
                                contrast_grad_norms=contrast)
    return Construction(model=model, x0=x0, labels=labels, report=report)
