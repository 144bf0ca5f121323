import math
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

ActivationName = Literal["identity", "centered_softplus", "tanh", "relu", "softplus"]
InitScheme = Literal["gaussian", "orthogonal"]
Task = Literal["classification", "regression"]
Experiment = Literal["depth-contrast", "init-profile"]


# --- configuration -----------------------------------------------------------

class CsbmParams(BaseModel):
    n: int = 300
    p_in: float = 0.1
    p_out: float = 0.02
    d: int = 8
    mu: float = 1.0
    noise_std: float = 1.0

    @model_validator(mode="after")
    def _check(self):
        if self.n < 2 or self.n % 2:
            raise ValueError(f"n must be even and >= 2 (two balanced communities), got {self.n}")
        if not 0.0 <= self.p_out < self.p_in <= 1.0 and not (self.p_in == self.p_out == 1.0):
            raise ValueError(f"need 0 <= p_out < p_in <= 1, got p_in={self.p_in}, p_out={self.p_out}")
        if self.d < 1:
            raise ValueError("feature dimension d must be positive")
        return self


class TrainConfig(BaseModel):
    epochs: int = 300
    learning_rate: float = 0.05
    snapshot_epochs: List[int] = Field(default_factory=lambda: [0, 1, 5, 10, 50])
    seed: int = 0
    log_every: int = 50

    @field_validator("learning_rate")
    @classmethod
    def _positive_lr(cls, value: float) -> float:
        if value < 0:
            raise ValueError("learning_rate must be >= 0")
        return value


class DepthContrastConfig(BaseModel):
    csbm: CsbmParams = Field(default_factory=CsbmParams)
    seed: int = 0
    width: int = 64
    # value of a constant input column appended to the features; 0 appends nothing
    constant_feature: float = 3.0
    activation: ActivationName = "tanh"
    init_scheme: InitScheme = "orthogonal"
    target_spectral_norm: float = 1.0
    learning_rate: float = 0.05
    epochs: int = 300
    shallow_depth: int = 5
    deep_depth: int = 40
    workers: int = 1


class InitProfileConfig(BaseModel):
    csbm: CsbmParams = Field(default_factory=CsbmParams)
    seed: int = 0
    depth: int = 40
    width: int = 16
    activation: ActivationName = "centered_softplus"
    init_scheme: InitScheme = "gaussian"
    target_spectral_norm: float = 1.0
    task: Task = "classification"


class SweepConfig(BaseModel):
    csbm: CsbmParams = Field(default_factory=CsbmParams)
    seed: int = 0
    depths: List[int] = Field(default_factory=lambda: [5, 10, 20, 40])
    alphas: List[float] = Field(default_factory=lambda: [0.0, 0.1])
    tasks: List[Task] = Field(default_factory=lambda: ["classification", "regression"])
    width: int = 8
    activation: ActivationName = "centered_softplus"
    beta: float = 0.5
    stationarity_constant: Optional[float] = None

    @field_validator("depths", "alphas", "tasks")
    @classmethod
    def _nonempty(cls, value):
        if not value:
            raise ValueError("sweep grid must be nonempty")
        return value


class RunConfig(BaseModel):
    """Flat CLI configuration; the sidecar written next to every run."""

    seed: int = 0
    n: int = 300
    p_in: float = 0.1
    p_out: float = 0.02
    d: int = 8
    mu: float = 1.0
    depth: int = 5
    width: int = 16
    activation: ActivationName = "centered_softplus"
    init_scheme: InitScheme = "gaussian"
    std_scale: float = 1.0
    target_spectral_norm: Optional[float] = 1.0
    mlp: bool = False
    task: Task = "classification"
    divisor_slack: float = 1.0
    epochs: int = 300
    learning_rate: float = 0.05
    snapshot_epochs: List[int] = Field(default_factory=lambda: [0, 1, 5, 10, 50])
    normalize_by_labeled: bool = False
    data_dir: Optional[str] = None
    experiment: Optional[Experiment] = None
    # SHA-256 prefix of P, features and labels; filled in by train
    input_hash: Optional[str] = None

    def csbm(self) -> CsbmParams:
        return CsbmParams(n=self.n, p_in=self.p_in, p_out=self.p_out, d=self.d, mu=self.mu)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            snapshot_epochs=self.snapshot_epochs,
            seed=self.seed,
        )


# --- reports -----------------------------------------------------------------

class Witness(BaseModel):
    check: str
    x: float
    y: Optional[float] = None
    value: float


class ActivationCheckReport(BaseModel):
    kind: ActivationName
    lipschitz_1_ok: bool
    abs_bound_ok: bool
    rho_prime_lipschitz_estimate: float
    declared_d_rho: Optional[float]
    rho_prime_lipschitz_ok: bool
    witnesses: List[Witness] = Field(default_factory=list)


class GradCheckReport(BaseModel):
    max_abs_err: float
    max_rel_err: float
    worst_layer: int
    n_params: int
    step: float


class RateFit(BaseModel):
    rate: float
    intercept: float
    r_squared: float
    k_lo: int
    k_hi: int


def _nonnegative_finite(name: str, values: List[float]) -> None:
    for k, value in enumerate(values):
        if not math.isfinite(value) or value < 0:
            raise ValueError(f"{name}[{k}] = {value} is not a nonnegative finite number")


class ProfileReport(BaseModel):
    forward_energy: List[float]
    backward_energy: List[float]
    grad_norms: List[float]
    spectral_norms: List[float]
    epsilon_n: float
    loss: float
    fitted_rates: Dict[str, RateFit] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check(self):
        depth = len(self.forward_energy)
        for name in ("forward_energy", "backward_energy", "grad_norms", "spectral_norms"):
            values = getattr(self, name)
            if len(values) != depth:
                raise ValueError(f"{name} has {len(values)} entries, expected {depth}")
            _nonnegative_finite(name, values)
        _nonnegative_finite("epsilon_n", [self.epsilon_n])
        _nonnegative_finite("loss", [self.loss])
        return self

    @property
    def depth(self) -> int:
        return len(self.forward_energy) - 1


class StationarityReport(BaseModel):
    delta: float
    per_layer: List[bool]
    is_global: bool
    max_grad_norm: float


class EpochRecord(BaseModel):
    epoch: int
    loss: float
    epsilon_n: float
    grad_norms: List[float]
    spectral_norms: List[float]


class TrainLog(BaseModel):
    records: List[EpochRecord] = Field(default_factory=list)
    snapshots: Dict[int, ProfileReport] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check(self):
        epochs = [r.epoch for r in self.records]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("epochs must be strictly increasing")
        if self.records:
            width = len(self.records[0].grad_norms)
            if any(len(r.grad_norms) != width or len(r.spectral_norms) != width for r in self.records):
                raise ValueError("every record must cover the same layers")
        return self

    def losses(self) -> List[float]:
        return [r.loss for r in self.records]

    def record_at(self, epoch: int) -> EpochRecord:
        for record in self.records:
            if record.epoch == epoch:
                return record
        raise KeyError(epoch)


class BoundRecord(BaseModel):
    check: str
    k: Optional[int] = None
    depth: Optional[int] = None
    task: Optional[Task] = None
    alpha: Optional[float] = None
    inputs: Dict[str, float] = Field(default_factory=dict)
    bound: float
    measured: Optional[float] = None
    satisfied: Optional[bool] = None


class MiddleLayerExponents(BaseModel):
    alpha: float
    beta: float
    q: int
    rate1: float
    rate2: float
    admissible: bool


class ConditionCheck(BaseModel):
    name: str
    lhs: float
    rhs: float
    satisfied: bool


class StationarityConditionsReport(BaseModel):
    case: Literal["lower-bounded-output", "balanced-regression", "balanced-classification"]
    applicable: bool
    reason: Optional[str] = None
    xi: float
    min_depth: Optional[int] = None
    conditions: List[ConditionCheck] = Field(default_factory=list)

    @property
    def all_satisfied(self) -> bool:
        return self.applicable and all(c.satisfied for c in self.conditions)


class ClaimCheck(BaseModel):
    name: str
    claimed: float
    measured: float
    tolerance: float

    @property
    def holds(self) -> bool:
        return abs(self.claimed - self.measured) <= self.tolerance


class ConstructionReport(BaseModel):
    construction: str
    n: int
    depth: int
    claims: List[ClaimCheck] = Field(default_factory=list)
    grad_norms: List[float] = Field(default_factory=list)
    backward_energy: List[float] = Field(default_factory=list)
    contrast_grad_norms: Optional[List[float]] = None
    warnings: List[str] = Field(default_factory=list)

    @property
    def all_hold(self) -> bool:
        return all(c.holds for c in self.claims)


class SkippedPoint(BaseModel):
    depth: int
    alpha: float
    task: Task
    reason: str


class SweepReport(BaseModel):
    lam: float
    records: List[BoundRecord] = Field(default_factory=list)
    skipped: List[SkippedPoint] = Field(default_factory=list)
    middle_energy: Dict[str, List[float]] = Field(default_factory=dict)
    middle_slope: Dict[str, float] = Field(default_factory=dict)
    stationarity_grad: Dict[str, List[float]] = Field(default_factory=dict)
    stationarity_constant: Optional[float] = None

    @property
    def violations(self) -> List[BoundRecord]:
        return [r for r in self.records if r.satisfied is False]


class DepthContrastSummary(BaseModel):
    final_loss: Dict[str, float]
    initial_loss: Dict[str, float]
    grad_ratio_epoch50: Dict[str, List[float]]
    fastest_decaying_layer: Dict[str, int]
