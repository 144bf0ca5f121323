import logging
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from errors import ContractViolation

logger = logging.getLogger(__name__)

ROW_NORM_TOL = 1e-12


@dataclass(frozen=True)
class LossConstants:
    d_l: float
    d_l_prime: float


@dataclass(frozen=True)
class LabelSet:
    """Regression targets (rows with norm <= 1) or class ids in 0..C-1.

    Masked-out nodes contribute nothing to the loss. The loss is normalised
    by n unless ``normalize_by_labeled`` is set, in which case by the number
    of labeled nodes.
    """

    kind: Literal["regression", "classification"]
    targets: Optional[np.ndarray] = None
    classes: Optional[np.ndarray] = None
    num_classes: Optional[int] = None
    mask: Optional[np.ndarray] = None
    normalize_by_labeled: bool = False

    @classmethod
    def regression(cls, targets, mask=None, normalize_by_labeled: bool = False) -> "LabelSet":
        y = np.asarray(targets, dtype=np.float64)
        if y.ndim == 1:
            y = y.reshape(-1, 1)
        if y.ndim != 2 or not np.all(np.isfinite(y)):
            raise ContractViolation(f"regression targets must be a finite n x d matrix, got shape {y.shape}")
        norms = np.linalg.norm(y, axis=1)
        if norms.size and norms.max() > 1.0 + ROW_NORM_TOL:
            i = int(np.argmax(norms))
            raise ContractViolation(f"regression target of node {i} has norm {norms[i]:.6g} > 1")
        return cls(kind="regression", targets=y, mask=_as_mask(mask, y.shape[0]),
                   normalize_by_labeled=normalize_by_labeled)

    @classmethod
    def classification(cls, classes, num_classes: Optional[int] = None, mask=None,
                       normalize_by_labeled: bool = False) -> "LabelSet":
        c = np.asarray(classes)
        if c.ndim != 1 or (c.size and not np.issubdtype(c.dtype, np.integer)):
            raise ContractViolation("class ids must be a 1-D integer array")
        c = c.astype(np.int64)
        num = int(num_classes) if num_classes is not None else int(c.max()) + 1 if c.size else 0
        if num < 2:
            raise ContractViolation(f"classification needs at least 2 classes, got {num}")
        if c.size and (c.min() < 0 or c.max() >= num):
            raise ContractViolation(f"class ids must lie in 0..{num - 1}")
        return cls(kind="classification", classes=c, num_classes=num, mask=_as_mask(mask, c.shape[0]),
                   normalize_by_labeled=normalize_by_labeled)

    @property
    def n(self) -> int:
        return self.targets.shape[0] if self.kind == "regression" else self.classes.shape[0]

    @property
    def d_out(self) -> int:
        return self.targets.shape[1] if self.kind == "regression" else self.num_classes

    @property
    def q(self) -> int:
        return 2 if self.kind == "regression" else 1

    @property
    def denominator(self) -> int:
        if self.normalize_by_labeled and self.mask is not None:
            return max(int(self.mask.sum()), 1)
        return self.n

    def node_weights(self) -> np.ndarray:
        w = np.full(self.n, 1.0 / self.denominator)
        if self.mask is not None:
            w = np.where(self.mask, w, 0.0)
        return w

    def one_hot(self) -> np.ndarray:
        e = np.zeros((self.n, self.num_classes))
        e[np.arange(self.n), self.classes] = 1.0
        return e


def _as_mask(mask, n: int) -> Optional[np.ndarray]:
    if mask is None:
        return None
    m = np.asarray(mask, dtype=bool)
    if m.shape != (n,):
        raise ContractViolation(f"mask must have shape ({n},), got {m.shape}")
    return m


def _check_shape(labels: LabelSet, h: np.ndarray) -> None:
    if h.ndim != 2 or h.shape != (labels.n, labels.d_out):
        raise ContractViolation(f"output shape {h.shape} does not match labels ({labels.n}, {labels.d_out})")


def _log_softmax(h: np.ndarray) -> np.ndarray:
    m = h.max(axis=1, keepdims=True)
    return h - (m + np.log(np.exp(h - m).sum(axis=1, keepdims=True)))


def node_losses(labels: LabelSet, h: np.ndarray) -> np.ndarray:
    """Unweighted per-node losses l_i(h_i)."""
    h = np.asarray(h)
    _check_shape(labels, h)
    if labels.kind == "regression":
        return 0.5 * ((h - labels.targets) ** 2).sum(axis=1)
    return -_log_softmax(h)[np.arange(labels.n), labels.classes]


def node_gradients(labels: LabelSet, h: np.ndarray) -> np.ndarray:
    """Unweighted per-node gradients dl_i/dh_i (one row per node)."""
    h = np.asarray(h)
    _check_shape(labels, h)
    if labels.kind == "regression":
        return h - labels.targets
    return np.exp(_log_softmax(h)) - labels.one_hot()


def loss_value(labels: LabelSet, h: np.ndarray) -> float:
    losses = node_losses(labels, h)
    weights = labels.node_weights().astype(losses.dtype)
    return (weights * losses).sum()


def output_gradient(labels: LabelSet, h: np.ndarray) -> np.ndarray:
    """B^(L) = dL/dH^(L)."""
    grads = node_gradients(labels, h)
    return labels.node_weights().astype(grads.dtype)[:, None] * grads


def loss_constants(labels: LabelSet) -> LossConstants:
    if labels.kind == "regression":
        return LossConstants(d_l=1.0, d_l_prime=1.0)
    return LossConstants(d_l=0.0, d_l_prime=float(labels.num_classes + 1))
