import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List

import numpy as np

from errors import ContractViolation
from models import GradCheckReport
from services.loss import LabelSet, loss_value, output_gradient
from services.model import ForwardTrace, GnnModel, forward

logger = logging.getLogger(__name__)

MAX_ORACLE_PARAMS = 20_000
REL_ERR_FLOOR = 1e-8


@dataclass
class BackwardTrace:
    """b[k] = dL/dH^(k) and grads[k] = dL/dW^(k), both indexed by layer k = 0..L."""

    b: List[np.ndarray]
    grads: List[np.ndarray]

    @property
    def depth(self) -> int:
        return len(self.b) - 1

    def grad_norms(self) -> List[float]:
        return [float(np.linalg.norm(g)) for g in self.grads]


def backward(model: GnnModel, trace: ForwardTrace, labels: LabelSet) -> BackwardTrace:
    if trace.depth != model.depth:
        raise ContractViolation(f"trace has depth {trace.depth} but the model has depth {model.depth}")
    for k, (f, w) in enumerate(zip(trace.f, model.weights)):
        if f.shape[1] != w.shape[0]:
            raise ContractViolation(f"layer {k}: trace signal does not match the model weight shape")

    depth = model.depth
    p = None if model.is_mlp else model.propagation.p
    b: List[np.ndarray] = [None] * (depth + 1)
    grads: List[np.ndarray] = [None] * (depth + 1)

    b[depth] = output_gradient(labels, trace.output)
    for k in range(depth, -1, -1):
        grads[k] = trace.f[k].T @ b[k]
        if k > 0:
            # P is symmetric, so P^T B = P B
            upstream = b[k] if p is None else p @ b[k]
            b[k - 1] = model.activation.derivative(trace.h[k - 1]) * (upstream @ model.weights[k].T)
    return BackwardTrace(b=b, grads=grads)


def gradients(model: GnnModel, x0: np.ndarray, labels: LabelSet) -> BackwardTrace:
    return backward(model, forward(model, x0), labels)


def _loss_with(model: GnnModel, weights: List[np.ndarray], x0: np.ndarray, labels: LabelSet):
    return loss_value(labels, forward(model.with_weights(weights), x0).output)


def _layer_differences(model, weights, x0, labels, k: int, step) -> np.ndarray:
    grad = np.zeros(weights[k].shape, dtype=weights[k].dtype)
    for idx in np.ndindex(*weights[k].shape):
        probe = list(weights)
        layer = weights[k].copy()
        original = layer[idx]
        layer[idx] = original + step
        probe[k] = layer
        plus = _loss_with(model, probe, x0, labels)
        layer = weights[k].copy()
        layer[idx] = original - step
        probe[k] = layer
        minus = _loss_with(model, probe, x0, labels)
        grad[idx] = (plus - minus) / (2 * step)
    return grad


def finite_difference_gradients(
    model: GnnModel,
    x0: np.ndarray,
    labels: LabelSet,
    step: float = 1e-5,
    dtype=np.longdouble,
    workers: int = 1,
) -> List[np.ndarray]:
    """Central differences of the loss, one full forward pass per probe.

    Probes run in ``dtype`` (extended precision by default) so that loss
    round-off stays far below the step's truncation error.
    """
    if not 1e-8 <= step <= 1e-2:
        raise ContractViolation(f"finite-difference step must lie in [1e-8, 1e-2], got {step}")
    weights = [np.asarray(w, dtype=dtype) for w in model.weights]
    x = np.asarray(x0, dtype=dtype)
    h = dtype(step)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_layer_differences, model, weights, x, labels, k, h) for k in range(len(weights))]
            layers = [f.result() for f in futures]
    else:
        layers = [_layer_differences(model, weights, x, labels, k, h) for k in range(len(weights))]
    return [g.astype(np.float64) for g in layers]


def grad_check(
    model: GnnModel,
    x0: np.ndarray,
    labels: LabelSet,
    step: float = 1e-5,
    workers: int = 1,
) -> GradCheckReport:
    if model.n_params > MAX_ORACLE_PARAMS:
        raise ContractViolation(
            f"model has {model.n_params} parameters; the finite-difference oracle is limited to "
            f"{MAX_ORACLE_PARAMS}, use a smaller width or depth"
        )
    exact = gradients(model, x0, labels).grads
    approx = finite_difference_gradients(model, x0, labels, step=step, workers=workers)

    max_abs, max_rel, worst = 0.0, 0.0, 0
    for k, (a, b) in enumerate(zip(exact, approx)):
        diff = np.abs(a - b)
        rel = diff / np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_ERR_FLOOR)
        max_abs = max(max_abs, float(diff.max()))
        if float(rel.max()) > max_rel:
            max_rel, worst = float(rel.max()), k
    logger.info("Gradient check: max abs err %.3e, max rel err %.3e (layer %d)", max_abs, max_rel, worst)
    return GradCheckReport(max_abs_err=max_abs, max_rel_err=max_rel, worst_layer=worst,
                           n_params=model.n_params, step=step)
