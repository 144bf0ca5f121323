"""Oversmoothing energy, per-layer profiles, decay-rate fits and stationarity."""

import logging
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from errors import ContractViolation
from models import ProfileReport, RateFit, StationarityReport
from services.backprop import BackwardTrace
from services.loss import LabelSet, loss_value
from services.model import ForwardTrace, GnnModel

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-300
BOUNDARY_LAYERS = 2


def energy(x: np.ndarray) -> float:
    """E(X) = n^{-1/2} ||X - 1 mean(X)||_F."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    n = x.shape[0]
    if n < 1:
        raise ContractViolation("energy needs at least one row")
    centered = x - x.mean(axis=0, keepdims=True)
    return float(np.linalg.norm(centered) / np.sqrt(n))


def energy_pairwise(x: np.ndarray) -> float:
    """Direct double sum over node pairs; O(n^2 d), used as an oracle."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    n = x.shape[0]
    diffs = x[:, None, :] - x[None, :, :]
    return float(np.sqrt((diffs ** 2).sum() / (2.0 * n * n)))


def epsilon_n(b_last: np.ndarray) -> float:
    """||1^T B^(L)||_2: norm of the column sums of the output gradient."""
    return float(np.linalg.norm(np.asarray(b_last, dtype=np.float64).sum(axis=0)))


def fit_decay_rate(series: Sequence[float], k_lo: int, k_hi: int) -> RateFit:
    """Least-squares fit of log(series_k) = intercept + k log(rate) over k_lo..k_hi."""
    values = np.asarray(series, dtype=np.float64)
    if not 0 <= k_lo < k_hi < values.shape[0]:
        raise ContractViolation(f"fit range [{k_lo}, {k_hi}] outside 0..{values.shape[0] - 1}")
    if k_hi - k_lo < 3:
        raise ContractViolation(f"fit range [{k_lo}, {k_hi}] needs at least 4 points")
    window = values[k_lo:k_hi + 1]
    bad_ks = np.flatnonzero(~np.isfinite(window) | (window <= 0))
    if bad_ks.size:
        bad = k_lo + int(bad_ks[0])
        raise ContractViolation(
            f"series value at k={bad} is not finite and positive; shrink the fit range above the floating-point floor"
        )

    ks = np.arange(k_lo, k_hi + 1, dtype=np.float64)
    logs = np.log(window)
    slope, intercept = np.polyfit(ks, logs, 1)
    residual = logs - (intercept + slope * ks)
    ss_tot = float(((logs - logs.mean()) ** 2).sum())
    ss_res = float((residual ** 2).sum())
    r_squared = 1.0 if ss_tot <= 1e-300 else 1.0 - ss_res / ss_tot
    return RateFit(rate=float(np.exp(slope)), intercept=float(intercept), r_squared=r_squared, k_lo=k_lo, k_hi=k_hi)


def usable_fit_range(series: Sequence[float], k_lo: int, k_hi: int) -> Optional[Tuple[int, int]]:
    """Shrink [k_lo, k_hi] to its longest leading run of values above the log floor."""
    values = np.asarray(series, dtype=np.float64)
    end = k_lo - 1
    for k in range(k_lo, min(k_hi, values.shape[0] - 1) + 1):
        if not values[k] > LOG_FLOOR:
            break
        end = k
    return (k_lo, end) if end - k_lo >= 3 else None


def profile(
    model: GnnModel,
    trace: ForwardTrace,
    btrace: BackwardTrace,
    labels: LabelSet,
    fit_range: Optional[Tuple[int, int]] = None,
) -> ProfileReport:
    if trace.depth != btrace.depth or trace.depth != model.depth:
        raise ContractViolation(
            f"trace depths differ: model {model.depth}, forward {trace.depth}, backward {btrace.depth}"
        )
    forward_energy = [energy(f) for f in trace.f]
    backward_energy = [energy(b) for b in btrace.b]

    depth = model.depth
    k_lo, k_hi = fit_range if fit_range is not None else (BOUNDARY_LAYERS, depth - BOUNDARY_LAYERS)
    fitted: Dict[str, RateFit] = {}
    usable = usable_fit_range(forward_energy, k_lo, k_hi) if k_hi - k_lo >= 3 else None
    if usable is not None:
        fitted["forward_energy"] = fit_decay_rate(forward_energy, *usable)

    return ProfileReport(
        forward_energy=forward_energy,
        backward_energy=backward_energy,
        grad_norms=btrace.grad_norms(),
        spectral_norms=model.spectral_norms(),
        epsilon_n=epsilon_n(btrace.b[-1]),
        loss=float(loss_value(labels, trace.output)),
        fitted_rates=fitted,
    )


def stationarity(btrace: BackwardTrace, delta: float) -> StationarityReport:
    if delta <= 0:
        raise ContractViolation(f"delta must be positive, got {delta}")
    norms = btrace.grad_norms()
    per_layer = [g <= delta for g in norms]
    return StationarityReport(delta=delta, per_layer=per_layer, is_global=all(per_layer), max_grad_norm=max(norms))
