import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Tuple

import numpy as np

from errors import RegimeError, TrainingDivergedError
from models import (
    BoundRecord,
    EpochRecord,
    DepthContrastConfig,
    DepthContrastSummary,
    InitProfileConfig,
    ProfileReport,
    SkippedPoint,
    SweepConfig,
    SweepReport,
    TrainConfig,
    TrainLog,
)
from services import bounds
from services.backprop import backward
from services.constructions import rademacher_labels, spurious_stationary_gnn
from services.graph import CsbmSample, PropagationMatrix, build_propagation, csbm_generate
from services.loss import LabelSet, loss_value
from services.metrics import energy, epsilon_n, profile
from services.model import GnnModel, build_model, forward

logger = logging.getLogger(__name__)

RATIO_EPOCH = 50
EARLY_EPOCH = 10


class Trainer:
    """Full-batch gradient descent with per-epoch instrumentation."""

    def __init__(self, log_every: Optional[int] = None):
        self.log_every = log_every

    def train(self, model: GnnModel, x0: np.ndarray, labels: LabelSet, config: TrainConfig,
              name: str = "run") -> TrainLog:
        """Run ``config.epochs`` updates; records epochs 0..epochs (the last is never updated from)."""
        log_every = self.log_every or config.log_every
        snapshot_epochs = set(config.snapshot_epochs) | {config.epochs}
        records: List[EpochRecord] = []
        snapshots: Dict[int, ProfileReport] = {}
        lr = config.learning_rate

        for epoch in range(config.epochs + 1):
            with np.errstate(over="ignore", invalid="ignore"):
                trace = forward(model, x0)
                btrace = backward(model, trace, labels)
                loss = float(loss_value(labels, trace.output))
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in btrace.grads):
                logger.warning("%s diverged at epoch %d (loss=%s, lr=%s)", name, epoch, loss, lr)
                raise TrainingDivergedError(epoch, lr, loss)

            records.append(EpochRecord(
                epoch=epoch,
                loss=loss,
                epsilon_n=epsilon_n(btrace.b[-1]),
                grad_norms=btrace.grad_norms(),
                spectral_norms=model.spectral_norms(),
            ))
            if epoch in snapshot_epochs:
                snapshots[epoch] = profile(model, trace, btrace, labels)
            if log_every and epoch % log_every == 0:
                logger.info("%s epoch %d: loss=%.6f max grad=%.3e", name, epoch, loss, max(records[-1].grad_norms))
            else:
                logger.debug("%s epoch %d: loss=%.6f", name, epoch, loss)

            if epoch < config.epochs and lr > 0:
                model.set_weights([w - lr * g for w, g in zip(model.weights, btrace.grads)])

        return TrainLog(records=records, snapshots=snapshots)


# --- experiments ---------------------------------------------------------------

def _csbm_instance(csbm, seed: int) -> Tuple[CsbmSample, PropagationMatrix]:
    sample = csbm_generate(csbm, seed)
    return sample, build_propagation(sample.graph)


def _class_labels(sample: CsbmSample) -> LabelSet:
    return LabelSet.classification(sample.labels, num_classes=2)


def _grad_ratios(log: TrainLog, epoch: int) -> List[float]:
    first = log.records[0].grad_norms
    later = log.record_at(min(epoch, log.records[-1].epoch)).grad_norms
    return [b / a if a > 0 else 0.0 for a, b in zip(first, later)]


def with_constant_feature(features: np.ndarray, value: float) -> np.ndarray:
    if value == 0.0:
        return features
    return np.hstack([features, np.full((features.shape[0], 1), value)])


def summarize_depth_contrast(logs: Dict[str, TrainLog]) -> DepthContrastSummary:
    return DepthContrastSummary(
        final_loss={name: log.records[-1].loss for name, log in logs.items()},
        initial_loss={name: log.records[0].loss for name, log in logs.items()},
        grad_ratio_epoch50={name: _grad_ratios(log, RATIO_EPOCH) for name, log in logs.items()},
        fastest_decaying_layer={
            name: int(np.argmin(_grad_ratios(log, EARLY_EPOCH))) for name, log in logs.items()
        },
    )


def contrast_model(config: DepthContrastConfig, d_in: int, d_out: int, depth: int,
                   propagation: Optional[PropagationMatrix]) -> GnnModel:
    return build_model(d_in, config.width, depth, d_out, propagation, activation=config.activation,
                       scheme=config.init_scheme, target_spectral_norm=config.target_spectral_norm,
                       seed=config.seed)


def experiment_depth_contrast(config: DepthContrastConfig, sample: Optional[CsbmSample] = None,
                    propagation: Optional[PropagationMatrix] = None) -> Tuple[Dict[str, TrainLog], DepthContrastSummary]:
    """Shallow and deep GNN and MLP trained on the same data with the same settings.

    Only depth and the propagation matrix differ; an MLP shares its initial
    weights with the GNN of the same depth. The inputs are the CSBM features
    plus a column holding ``config.constant_feature``.
    """
    if sample is None:
        sample, propagation = _csbm_instance(config.csbm, config.seed)
    elif propagation is None:
        propagation = build_propagation(sample.graph)
    labels = _class_labels(sample)
    x0 = with_constant_feature(sample.features, config.constant_feature)
    train_config = TrainConfig(epochs=config.epochs, learning_rate=config.learning_rate,
                               snapshot_epochs=[0, 1, 5, 10, 50], seed=config.seed)

    def run(name: str, depth: int, prop: Optional[PropagationMatrix]) -> TrainLog:
        model = contrast_model(config, x0.shape[1], labels.d_out, depth, prop)
        return Trainer().train(model, x0, labels, train_config, name=name)

    runs = [
        ("gnn_shallow", config.shallow_depth, propagation),
        ("gnn_deep", config.deep_depth, propagation),
        ("mlp_shallow", config.shallow_depth, None),
        ("mlp_deep", config.deep_depth, None),
    ]
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            futures = {name: pool.submit(run, name, depth, prop) for name, depth, prop in runs}
            logs = {name: f.result() for name, f in futures.items()}
    else:
        logs = {name: run(name, depth, prop) for name, depth, prop in runs}
    return logs, summarize_depth_contrast(logs)


def init_profile_instance(config: InitProfileConfig, sample: Optional[CsbmSample] = None,
                          propagation: Optional[PropagationMatrix] = None) -> Tuple[GnnModel, np.ndarray, LabelSet]:
    """The freshly initialised deep GNN, its input and its labels."""
    if sample is None:
        sample, propagation = _csbm_instance(config.csbm, config.seed)
    elif propagation is None:
        propagation = build_propagation(sample.graph)
    if config.task == "classification":
        labels = _class_labels(sample)
    else:
        labels = rademacher_labels(sample.graph.n, config.seed, balanced=True)
    x0 = sample.features
    model = build_model(x0.shape[1], config.width, config.depth, labels.d_out, propagation,
                        activation=config.activation, scheme=config.init_scheme,
                        target_spectral_norm=config.target_spectral_norm, seed=config.seed)
    return model, x0, labels


def experiment_init_profile(config: InitProfileConfig, sample: Optional[CsbmSample] = None,
                    propagation: Optional[PropagationMatrix] = None) -> ProfileReport:
    """Per-layer forward and backward energies of a freshly initialised deep GNN."""
    model, x0, labels = init_profile_instance(config, sample, propagation)
    trace = forward(model, x0)
    return profile(model, trace, backward(model, trace, labels), labels)


def middle_layer_ratio(report: ProfileReport) -> float:
    """E(B^(L/2)) / max(E(B^(2)), E(B^(L-2)))."""
    depth = report.depth
    e = report.backward_energy
    reference = max(e[2], e[depth - 2])
    return e[depth // 2] / reference if reference > 0 else 0.0


def _sweep_labels(task: str, sample: CsbmSample, seed: int) -> LabelSet:
    if task == "classification":
        return _class_labels(sample)
    return rademacher_labels(sample.graph.n, seed, balanced=True)


def experiment_bound_sweep(config: SweepConfig, sample: Optional[CsbmSample] = None,
                           propagation: Optional[PropagationMatrix] = None) -> SweepReport:
    """Measured energies and gradients against every bound over a (depth, alpha, task) grid.

    The stationarity constant is calibrated on the smallest depth of each
    column unless ``config.stationarity_constant`` is set.
    """
    if sample is None:
        sample, propagation = _csbm_instance(config.csbm, config.seed)
    elif propagation is None:
        propagation = build_propagation(sample.graph)
    lam = propagation.lam
    x0 = sample.features
    report = SweepReport(lam=lam, stationarity_constant=config.stationarity_constant)

    for task in config.tasks:
        labels = _sweep_labels(task, sample, config.seed)
        for alpha in config.alphas:
            column = f"{task}/alpha={alpha:g}"
            depths, middle, stationary = [], [], []
            constant = config.stationarity_constant
            for depth in sorted(config.depths):
                if not 0.0 <= alpha < 1.0:
                    report.skipped.append(SkippedPoint(depth=depth, alpha=alpha, task=task,
                                                       reason=f"alpha = {alpha} outside [0, 1)"))
                    continue
                target = lam ** (-alpha) if lam > 0 else 1.0
                model = build_model(x0.shape[1], config.width, depth, labels.d_out, propagation,
                                    activation=config.activation, target_spectral_norm=target, seed=config.seed)
                try:
                    inputs = bounds.BoundInputs.from_instance(model, x0, labels)
                    trace = forward(model, x0)
                    btrace = backward(model, trace, labels)
                    records = bounds.check_forward(inputs, trace) + bounds.check_backward(inputs, btrace)
                except RegimeError as e:
                    report.skipped.append(SkippedPoint(depth=depth, alpha=alpha, task=task, reason=str(e)))
                    continue
                for record in records:
                    record.task, record.alpha = task, alpha
                report.records.extend(records)
                depths.append(depth)
                middle.append(energy(btrace.b[int(config.beta * depth)]))

                if task == "regression" and bounds.xi(inputs.alpha, inputs.q) > 0:
                    spurious = spurious_stationary_gnn(model, x0, labels)
                    s_btrace = backward(spurious.model, forward(spurious.model, x0), labels)
                    eps = epsilon_n(s_btrace.b[-1])
                    measured = max(s_btrace.grad_norms())
                    stationary.append(measured)
                    if constant is None:
                        constant = measured / bounds.global_stationarity_bound(inputs, eps, 1.0)
                        report.stationarity_constant = constant
                    record = bounds.check_global_stationarity(inputs, s_btrace, eps, constant)
                    record.task, record.alpha = task, alpha
                    report.records.append(record)

            report.middle_energy[column] = middle
            if stationary:
                report.stationarity_grad[column] = stationary
            if len(depths) >= 2 and all(v > 0 for v in middle):
                slope = float(np.polyfit(np.array(depths, dtype=float), np.log(middle), 1)[0])
                report.middle_slope[column] = slope
                report.records.append(_middle_rate_record(labels, lam, alpha, config.beta, slope, task))
    logger.info("Bound sweep: %d records, %d violations, %d skipped",
                len(report.records), len(report.violations), len(report.skipped))
    return report


def _middle_rate_record(labels: LabelSet, lam: float, alpha: float, beta: float, slope: float, task: str) -> BoundRecord:
    """Fitted log-slope of E(B^(beta L)) in L against the predicted decay exponent."""
    inputs = bounds.BoundInputs(lam=lam, s=1.0, depth=1, d_x=1.0, d_rho=0.0, d_l=0.0, d_l_prime=0.0,
                                n=labels.n, alpha=alpha, q=labels.q)
    exponents = bounds.middle_layer_exponents(inputs, beta)
    predicted = -min(exponents.rate1, exponents.rate2)
    return BoundRecord(
        check="backward_rate",
        task=task,
        alpha=alpha,
        inputs={"beta": beta, "rate1": exponents.rate1, "rate2": exponents.rate2,
                "admissible": float(exponents.admissible)},
        bound=predicted,
        measured=slope,
        satisfied=(slope <= predicted + 1e-9) if exponents.admissible else None,
    )
