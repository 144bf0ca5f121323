"""Closed-form evaluators for the oversmoothing bounds and the checkers that
compare them with measured energies and gradient norms.

Hidden "up to a constant" factors are exposed as explicit arguments that
default to 1; checkers report both sides of every inequality.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Union

import numpy as np

from errors import ContractViolation, RegimeError
from models import BoundRecord, ConditionCheck, MiddleLayerExponents, StationarityConditionsReport
from services import numkit
from services.backprop import BackwardTrace, backward
from services.loss import LabelSet, loss_constants
from services.metrics import energy, epsilon_n
from services.model import ForwardTrace, GnnModel, forward

logger = logging.getLogger(__name__)

ABS_SLACK = 1e-9
REL_SLACK = 1e-12
CLASSIFICATION_ALPHA_LIMIT = 1.0 / 3.0


def expansion_rate(s: float, lam: float) -> float:
    """alpha with s = lam^{-alpha}; zero when the weights do not expand."""
    if s <= 1.0:
        return 0.0
    if lam <= 0.0:
        return 0.0
    return math.log(s) / math.log(1.0 / lam)


@dataclass(frozen=True)
class BoundInputs:
    lam: float
    s: float
    depth: int
    d_x: float
    d_rho: float
    d_l: float
    d_l_prime: float
    n: int
    alpha: float = 0.0
    q: int = 1

    def __post_init__(self):
        if not 0.0 <= self.lam < 1.0:
            raise ContractViolation(f"lambda must lie in [0, 1), got {self.lam}")
        if self.s <= 0:
            raise ContractViolation(f"s must be positive, got {self.s}")
        if self.q not in (1, 2):
            raise ContractViolation(f"q must be 1 (classification) or 2 (regression), got {self.q}")
        if self.n < 1:
            raise ContractViolation("n must be positive")

    @staticmethod
    def reduce_s(s: Union[float, Sequence[float]]) -> float:
        return float(max(s)) if isinstance(s, (list, tuple, np.ndarray)) else float(s)

    @classmethod
    def from_instance(cls, model: GnnModel, x0: np.ndarray, labels: LabelSet) -> "BoundInputs":
        if model.is_mlp:
            raise RegimeError("bounds need a graph propagation matrix; the model is in MLP mode")
        d_rho = model.activation.d_rho
        if d_rho is None or model.activation.violates_assumptions:
            raise RegimeError(f"activation {model.activation.kind!r} violates the activation assumptions")
        lam = model.propagation.lam
        s = model.s_max
        constants = loss_constants(labels)
        return cls(
            lam=lam,
            s=s,
            depth=model.depth,
            d_x=numkit.norm_2inf(x0),
            d_rho=d_rho,
            d_l=constants.d_l,
            d_l_prime=constants.d_l_prime,
            n=labels.denominator,
            alpha=expansion_rate(s, lam),
            q=labels.q,
        )

    def with_alpha(self, alpha: float) -> "BoundInputs":
        return replace(self, alpha=alpha)

    def as_dict(self) -> dict:
        return {
            "lambda": self.lam, "s": self.s, "L": float(self.depth), "d_x": self.d_x, "d_rho": self.d_rho,
            "d_l": self.d_l, "d_l_prime": self.d_l_prime, "n": float(self.n), "alpha": self.alpha,
            "q": float(self.q),
        }


def _require_forward_regime(b: BoundInputs) -> None:
    if b.lam * b.s >= 1.0:
        raise RegimeError(f"lambda*s = {b.lam * b.s:.6g} >= 1: outside oversmoothing regime")


def forward_bound(b: BoundInputs, k: int, e0: float) -> float:
    if k < 0:
        raise ContractViolation(f"layer index must be >= 0, got {k}")
    _require_forward_regime(b)
    return (b.lam * b.s) ** k * e0


def forward_bound_alpha(lam: float, alpha: float, k: int, e0: float) -> float:
    """lam^{(1-alpha)k} e0, the same envelope written with s = lam^{-alpha}."""
    if not 0.0 <= alpha < 1.0:
        raise RegimeError(f"alpha must lie in [0, 1), got {alpha}")
    if k < 0:
        raise ContractViolation(f"layer index must be >= 0, got {k}")
    return lam ** ((1.0 - alpha) * k) * e0


def backward_bound(b: BoundInputs, k: int) -> float:
    if not 0 <= k <= b.depth:
        raise ContractViolation(f"layer index {k} outside 0..{b.depth}")
    if b.lam ** 2 * b.s >= 1.0:
        raise RegimeError(f"lambda^2*s = {b.lam ** 2 * b.s:.6g} >= 1: outside oversmoothing regime")
    s_pow = b.s ** (b.depth + 1)
    scale = (b.d_x * b.d_l * s_pow + b.d_l_prime) / b.n
    middle = b.d_rho * b.d_x * s_pow * b.lam ** (k + 1) / (1.0 - b.lam ** 2 * b.s)
    return scale * (middle + (b.lam * b.s) ** (b.depth - k))


def middle_layer_exponents(b: BoundInputs, beta: float) -> MiddleLayerExponents:
    if not 0.0 < beta < 1.0:
        raise ContractViolation(f"beta must lie in (0, 1), got {beta}")
    q, alpha = b.q, b.alpha
    log_inv = math.log(1.0 / b.lam) if b.lam > 0 else math.inf
    rate1 = (beta - q * alpha) * log_inv
    rate2 = (1.0 - q * alpha - (1.0 - alpha) * beta) * log_inv
    admissible = (
        q * alpha < beta < (1.0 - q * alpha) / (1.0 - alpha)
        and alpha < 1.0 - math.sqrt(1.0 - 1.0 / q)
    )
    return MiddleLayerExponents(alpha=alpha, beta=beta, q=q, rate1=rate1, rate2=rate2, admissible=admissible)


def xi(alpha: float, q: int) -> float:
    if not 0.0 <= alpha < 1.0:
        raise ContractViolation(f"alpha must lie in [0, 1), got {alpha}")
    return (1.0 - (2 * q + 1) * alpha + q * alpha ** 2) / (2.0 * (1.0 - alpha))


def alpha_threshold(q: int) -> float:
    """Largest alpha with xi_q(alpha) >= 0."""
    return 1.0 + 1.0 / (2 * q) - math.sqrt(1.0 + 1.0 / (4 * q * q))


def global_stationarity_bound(b: BoundInputs, eps_n: float, c: float = 1.0) -> float:
    x = xi(b.alpha, b.q)
    if x <= 0:
        raise RegimeError(f"xi = {x:.6g} <= 0: expansion rate too large for the stationarity bound")
    expansion = b.lam ** (-b.alpha * b.depth) if b.alpha > 0 else 1.0
    return c * (b.lam ** (x * b.depth) + expansion * eps_n)


def stationarity_conditions_report(
    b: BoundInputs,
    case: str,
    delta: float,
    delta_bar: float,
    d_f: Optional[float] = None,
    nu: float = 0.05,
    constant: float = 1.0,
) -> StationarityConditionsReport:
    """Evaluate the depth, sample-size and output-stationarity conditions.

    Conditions are stated with unit constants scaled by ``constant``; every
    check carries both sides so margins can be read off directly.
    """
    if delta <= 0:
        raise ContractViolation(f"delta must be positive, got {delta}")
    if case not in ("lower-bounded-output", "balanced-regression", "balanced-classification"):
        raise ContractViolation(f"unknown case {case!r}")
    q = 2 if case == "balanced-regression" else 1 if case == "balanced-classification" else b.q
    x = xi(b.alpha, q) if b.alpha < 1.0 else -math.inf

    if x <= 0:
        return StationarityConditionsReport(case=case, applicable=False, xi=x,
                           reason=f"xi_{q}({b.alpha:.4g}) = {x:.4g} <= 0; alpha at or above {alpha_threshold(q):.5f}")
    if case == "balanced-classification" and b.alpha >= CLASSIFICATION_ALPHA_LIMIT:
        return StationarityConditionsReport(case=case, applicable=False, xi=x,
                           reason=f"alpha = {b.alpha:.4g} violates alpha < 1/3 for balanced classification")
    if b.lam <= 0:
        return StationarityConditionsReport(case=case, applicable=True, xi=x, min_depth=0, reason="lambda = 0: one layer suffices")

    log_inv = math.log(1.0 / b.lam)
    depth = b.depth
    conditions: List[ConditionCheck] = []

    if case == "lower-bounded-output":
        if d_f is None or d_f <= 0:
            raise ContractViolation("the lower-bounded-output case needs a positive output lower bound d_f")
        depth_needed = constant * math.log(1.0 / (d_f * delta)) / (x * log_inv)
        bar_limit = constant * b.lam ** (b.alpha * depth) * d_f * delta
    else:
        rate = x if case == "balanced-regression" else 1.0 - 3.0 * b.alpha
        depth_needed = constant * math.log(1.0 / delta) / (rate * log_inv)
        n_needed = constant * delta ** -2 * b.lam ** (-2.0 * b.alpha * depth) * math.log(1.0 / nu)
        bar_limit = constant * b.lam ** (2.0 * b.alpha * depth) * delta ** 2
        conditions.append(ConditionCheck(name="sample_size", lhs=float(b.n), rhs=n_needed, satisfied=b.n >= n_needed))

    min_depth = max(int(math.ceil(depth_needed - 1e-12)), 0)
    conditions.insert(0, ConditionCheck(name="depth", lhs=float(depth), rhs=depth_needed, satisfied=depth >= depth_needed))
    conditions.append(ConditionCheck(name="output_stationarity", lhs=delta_bar, rhs=bar_limit,
                                     satisfied=delta_bar <= bar_limit))
    return StationarityConditionsReport(case=case, applicable=True, xi=x, min_depth=min_depth, conditions=conditions)


# --- checkers ------------------------------------------------------------------

def _within(measured: float, bound: float) -> bool:
    return measured <= bound * (1.0 + REL_SLACK) + ABS_SLACK


def check_forward(b: BoundInputs, trace: ForwardTrace) -> List[BoundRecord]:
    """E(X^(k)) against (lambda s)^k E(X^(0)) for every post-activation signal."""
    e0 = energy(trace.x[0])
    records = []
    for k, x in enumerate(trace.x):
        bound = forward_bound(b, k, e0)
        measured = energy(x)
        records.append(BoundRecord(check="forward", k=k, depth=b.depth, inputs=b.as_dict(), bound=bound,
                                   measured=measured, satisfied=_within(measured, bound)))
    return records


def check_backward(b: BoundInputs, btrace: BackwardTrace) -> List[BoundRecord]:
    records = []
    for k, bk in enumerate(btrace.b):
        bound = backward_bound(b, k)
        measured = energy(bk)
        records.append(BoundRecord(check="backward", k=k, depth=b.depth, inputs=b.as_dict(), bound=bound,
                                   measured=measured, satisfied=_within(measured, bound)))
    return records


def check_global_stationarity(b: BoundInputs, btrace: BackwardTrace, eps_n: float, c: float = 1.0) -> BoundRecord:
    bound = global_stationarity_bound(b, eps_n, c)
    measured = max(btrace.grad_norms())
    return BoundRecord(check="global_stationarity", depth=b.depth, inputs={**b.as_dict(), "epsilon_n": eps_n, "c": c},
                       bound=bound, measured=measured, satisfied=_within(measured, bound))


def row_norm_bound_report(model: GnnModel, trace: ForwardTrace, btrace: BackwardTrace,
                          labels: LabelSet) -> List[BoundRecord]:
    """Row-norm growth of forward and backward signals against the products of s_k."""
    s = model.spectral_norms()
    constants = loss_constants(labels)
    d_x = trace.d_x
    s_total = float(np.prod(s))
    records = []
    for k, x in enumerate(trace.x):
        bound = float(np.prod(s[:k])) * d_x
        measured = numkit.norm_2inf(x)
        records.append(BoundRecord(check="forward_row_norm", k=k, depth=model.depth, bound=bound,
                                   measured=measured, satisfied=_within(measured, bound)))
    for k, bk in enumerate(btrace.b):
        bound = (s_total * d_x * constants.d_l + constants.d_l_prime) / labels.denominator * float(np.prod(s[k + 1:]))
        measured = numkit.norm_2inf(bk)
        records.append(BoundRecord(check="backward_row_norm", k=k, depth=model.depth, bound=bound,
                                   measured=measured, satisfied=_within(measured, bound)))
    return records


def instance_bound_records(model: GnnModel, x0: np.ndarray, labels: LabelSet,
                           c: Optional[float] = None) -> List[BoundRecord]:
    """Forward, backward and row-norm checks on one instance, plus global stationarity when xi > 0."""
    inputs = BoundInputs.from_instance(model, x0, labels)
    trace = forward(model, x0)
    btrace = backward(model, trace, labels)
    records = check_forward(inputs, trace) + check_backward(inputs, btrace)
    records += row_norm_bound_report(model, trace, btrace, labels)
    if xi(inputs.alpha, inputs.q) > 0:
        records.append(check_global_stationarity(inputs, btrace, epsilon_n(btrace.b[-1]), c or 1.0))
    return records
