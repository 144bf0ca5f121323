import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from errors import ContractViolation
from models import ActivationCheckReport, ActivationName, InitScheme, Witness
from services import numkit
from services.graph import PropagationMatrix
from services.rng import stream

logger = logging.getLogger(__name__)

# Lipschitz constants of rho'; None marks a discontinuous derivative.
D_RHO = {
    "identity": 0.0,
    "centered_softplus": 0.25,
    "softplus": 0.25,
    "tanh": 4.0 / (3.0 * math.sqrt(3.0)),
    "relu": None,
}


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass(frozen=True)
class Activation:
    kind: ActivationName = "centered_softplus"

    def __post_init__(self):
        if self.kind not in D_RHO:
            raise ContractViolation(f"unknown activation {self.kind!r}")

    @property
    def d_rho(self) -> Optional[float]:
        return D_RHO[self.kind]

    @property
    def violates_assumptions(self) -> bool:
        return self.kind in ("relu", "softplus")

    def apply(self, m: np.ndarray) -> np.ndarray:
        m = np.asarray(m)
        if self.kind == "identity":
            return m.copy()
        if self.kind == "centered_softplus":
            return np.logaddexp(0, m) - np.log(np.asarray(2, dtype=m.dtype))
        if self.kind == "softplus":
            return np.logaddexp(0, m)
        if self.kind == "tanh":
            return np.tanh(m)
        return np.maximum(m, 0)

    def derivative(self, m: np.ndarray) -> np.ndarray:
        m = np.asarray(m)
        if self.kind == "identity":
            return np.ones_like(m)
        if self.kind in ("centered_softplus", "softplus"):
            return _sigmoid(m)
        if self.kind == "tanh":
            return 1 - np.tanh(m) ** 2
        return (m > 0).astype(m.dtype)


def check_activation_assumptions(
    a: Activation,
    grid_half_width: float = 10.0,
    grid_points: int = 2001,
) -> ActivationCheckReport:
    """Check |rho(x)| <= |x|, 1-Lipschitz rho, and estimate Lip(rho') on a grid.

    Adjacent divided differences give the all-pairs maximum for a function of
    one variable, so only neighbours are compared. The grid is symmetric and
    always contains 0.
    """
    if grid_points < 100:
        raise ContractViolation(f"grid_points must be >= 100, got {grid_points}")
    if grid_half_width <= 0:
        raise ContractViolation("grid_half_width must be positive")
    points = grid_points if grid_points % 2 else grid_points + 1
    x = np.linspace(-grid_half_width, grid_half_width, points)
    x[points // 2] = 0.0
    rho = a.apply(x)
    drho = a.derivative(x)
    dx = np.diff(x)
    witnesses: List[Witness] = []

    excess = np.abs(rho) - np.abs(x)
    i = int(np.argmax(excess))
    abs_ok = bool(excess[i] <= 1e-12)
    if not abs_ok:
        witnesses.append(Witness(check="abs_bound", x=float(x[i]), value=float(rho[i])))

    slopes = np.abs(np.diff(rho)) / dx
    j = int(np.argmax(slopes))
    lip_ok = bool(slopes[j] <= 1.0 + 1e-12)
    if not lip_ok:
        witnesses.append(Witness(check="lipschitz_1", x=float(x[j]), y=float(x[j + 1]), value=float(slopes[j])))

    prime_slopes = np.abs(np.diff(drho)) / dx
    jp = int(np.argmax(prime_slopes))
    estimate = float(prime_slopes[jp])
    declared = a.d_rho
    prime_ok = declared is not None and estimate <= declared + 1e-6
    if not prime_ok:
        witnesses.append(Witness(check="rho_prime_lipschitz", x=float(x[jp]), y=float(x[jp + 1]), value=estimate))

    return ActivationCheckReport(
        kind=a.kind,
        lipschitz_1_ok=lip_ok,
        abs_bound_ok=abs_ok,
        rho_prime_lipschitz_estimate=estimate,
        declared_d_rho=declared,
        rho_prime_lipschitz_ok=prime_ok,
        witnesses=witnesses,
    )


def layer_dims(d_in: int, width: int, depth: int, d_out: int) -> List[int]:
    """d_0..d_{L+1} with constant hidden width."""
    if depth < 0:
        raise ContractViolation(f"depth must be >= 0, got {depth}")
    return [d_in] + [width] * depth + [d_out]


def init_weights(
    dims: Sequence[int],
    scheme: InitScheme = "gaussian",
    std_scale: float = 1.0,
    target_spectral_norm: Optional[float] = None,
    seed: int = 0,
) -> List[np.ndarray]:
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ContractViolation(f"dims must hold at least two positive sizes, got {list(dims)}")
    if target_spectral_norm is not None and target_spectral_norm <= 0:
        raise ContractViolation(f"target_spectral_norm must be positive, got {target_spectral_norm}")

    rng = stream(seed, "weights")
    weights = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        g = rng.standard_normal((d_in, d_out))
        if scheme == "gaussian":
            w = g * (std_scale / math.sqrt(d_in))
        elif scheme == "orthogonal":
            # semi-orthogonal: all singular values equal to 1
            if d_in >= d_out:
                q, r = np.linalg.qr(g)
                w = q * np.sign(np.diag(r))
            else:
                q, r = np.linalg.qr(g.T)
                w = (q * np.sign(np.diag(r))).T
            w = w * std_scale
        else:
            raise ContractViolation(f"unknown init scheme {scheme!r}")
        if target_spectral_norm is not None:
            w = w * (target_spectral_norm / numkit.spectral_norm(w))
        weights.append(w)
    return weights


@dataclass
class GnnModel:
    """Vanilla GNN of depth L: L+1 weight matrices, no biases.

    ``propagation=None`` is the MLP case (P = Id).
    """

    weights: List[np.ndarray]
    activation: Activation = field(default_factory=Activation)
    propagation: Optional[PropagationMatrix] = None
    seed: Optional[int] = None
    _spectral_norms: Optional[List[float]] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if not self.weights:
            raise ContractViolation("a model needs at least one weight matrix")
        for k, w in enumerate(self.weights):
            if np.asarray(w).ndim != 2:
                raise ContractViolation(f"layer {k}: weight must be 2-D, got shape {np.shape(w)}")
        for k in range(1, len(self.weights)):
            if self.weights[k - 1].shape[1] != self.weights[k].shape[0]:
                raise ContractViolation(
                    f"layer {k}: weight has {self.weights[k].shape[0]} input rows but layer {k - 1} "
                    f"outputs {self.weights[k - 1].shape[1]} columns"
                )

    @property
    def depth(self) -> int:
        return len(self.weights) - 1

    @property
    def dims(self) -> List[int]:
        return [w.shape[0] for w in self.weights] + [self.weights[-1].shape[1]]

    @property
    def is_mlp(self) -> bool:
        return self.propagation is None

    @property
    def n_params(self) -> int:
        return int(sum(w.size for w in self.weights))

    def spectral_norms(self) -> List[float]:
        if self._spectral_norms is None:
            self._spectral_norms = [numkit.spectral_norm(np.asarray(w, dtype=np.float64)) for w in self.weights]
        return list(self._spectral_norms)

    @property
    def s_max(self) -> float:
        return max(self.spectral_norms())

    def set_weights(self, weights: List[np.ndarray]) -> None:
        if [w.shape for w in weights] != [w.shape for w in self.weights]:
            raise ContractViolation("replacement weights must keep every layer shape")
        self.weights = weights
        self._spectral_norms = None

    def with_weights(self, weights: List[np.ndarray]) -> "GnnModel":
        return GnnModel(weights=weights, activation=self.activation, propagation=self.propagation, seed=self.seed)

    def copy(self) -> "GnnModel":
        return self.with_weights([w.copy() for w in self.weights])


def build_model(
    d_in: int,
    width: int,
    depth: int,
    d_out: int,
    propagation: Optional[PropagationMatrix],
    activation: ActivationName = "centered_softplus",
    scheme: InitScheme = "gaussian",
    std_scale: float = 1.0,
    target_spectral_norm: Optional[float] = 1.0,
    seed: int = 0,
) -> GnnModel:
    dims = layer_dims(d_in, width, depth, d_out)
    weights = init_weights(dims, scheme, std_scale, target_spectral_norm, seed)
    return GnnModel(weights=weights, activation=Activation(activation), propagation=propagation, seed=seed)


@dataclass
class ForwardTrace:
    x: List[np.ndarray]
    f: List[np.ndarray]
    h: List[np.ndarray]
    d_x: float

    @property
    def output(self) -> np.ndarray:
        return self.h[-1]

    @property
    def depth(self) -> int:
        return len(self.h) - 1


def forward(model: GnnModel, x0: np.ndarray) -> ForwardTrace:
    """F = P X, H = F W, X' = rho(H); the output is H^(L) with no activation."""
    x = np.asarray(x0)
    if x.dtype != np.longdouble:
        x = x.astype(np.float64)
    if x.ndim != 2:
        raise ContractViolation(f"input features must be 2-D, got shape {x.shape}")
    if not model.is_mlp and x.shape[0] != model.propagation.n:
        raise ContractViolation(
            f"input has {x.shape[0]} rows but the propagation matrix is {model.propagation.n}x{model.propagation.n}"
        )

    p = None if model.is_mlp else model.propagation.p
    xs, fs, hs = [x], [], []
    for k, w in enumerate(model.weights):
        if xs[-1].shape[1] != w.shape[0]:
            raise ContractViolation(
                f"layer {k}: signal has {xs[-1].shape[1]} columns but weight expects {w.shape[0]}"
            )
        f = xs[-1] if p is None else p @ xs[-1]
        h = f @ w
        fs.append(f)
        hs.append(h)
        if k < model.depth:
            xs.append(model.activation.apply(h))
    return ForwardTrace(x=xs, f=fs, h=hs, d_x=numkit.norm_2inf(x))
