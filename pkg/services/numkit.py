"""Dense float64 matrix helpers: validation, symmetric eigendecomposition and
the spectral norm. Every function is pure and safe to call concurrently."""

import logging
from typing import Literal, Tuple

import numpy as np

from errors import ContractViolation

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Validate user data as a finite 2-D float64 array (copied)."""
    m = np.array(values, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise ContractViolation(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ContractViolation(f"{name} contains NaN or Inf")
    return m


def max_asymmetry(m: np.ndarray) -> float:
    return float(np.max(np.abs(m - m.T))) if m.size else 0.0


def _check_symmetric(m: np.ndarray) -> None:
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ContractViolation(f"sym_eigs needs a square matrix, got shape {m.shape}")
    asym = max_asymmetry(m)
    if asym > SYMMETRY_TOL:
        raise ContractViolation(f"sym_eigs needs a symmetric matrix (max asymmetry {asym:.3e})")


def sym_eigs(
    m: np.ndarray,
    method: Literal["lapack", "jacobi"] = "lapack",
) -> Tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and orthonormal eigenvectors (columns) of a symmetric matrix."""
    m = np.asarray(m, dtype=np.float64)
    _check_symmetric(m)
    sym = 0.5 * (m + m.T)
    if method == "jacobi":
        values, vectors = jacobi_eigh(sym)
    elif method == "lapack":
        values, vectors = np.linalg.eigh(sym)
    else:
        raise ContractViolation(f"unknown eigensolver {method!r}")

    order = np.argsort(-values, kind="stable")
    return values[order], vectors[:, order]


def jacobi_eigh(m: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100) -> Tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi rotations on a symmetric matrix.

    Each rotation zeroes one off-diagonal pair; sweeps run until the
    off-diagonal Frobenius mass drops below ``tol`` times the total mass.
    """
    a = np.array(m, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    total = np.linalg.norm(a)
    if n < 2 or total == 0.0:
        return np.diag(a).copy(), v

    for sweep in range(max_sweeps):
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * total:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c

                # rotate columns p, q then rows p, q
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq

                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        logger.warning("Jacobi eigensolver stopped after %d sweeps", max_sweeps)

    return np.diag(a).copy(), v


def spectral_norm(
    m: np.ndarray,
    method: Literal["lapack", "power"] = "lapack",
    tol: float = 1e-13,
    max_iter: int = 10_000,
) -> float:
    """Largest singular value of a matrix.

    ``lapack`` takes it from the SVD. ``power`` runs power iteration on mᵀm:
    the start vector is the normalised all-ones vector; if the Rayleigh
    quotient stalls at zero (start orthogonal to the top singular space)
    the iteration restarts once from a fixed perturbed vector.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        raise ContractViolation("spectral_norm needs a nonempty matrix")
    if not np.any(m):
        return 0.0
    if method == "lapack":
        return float(np.linalg.norm(m, 2))
    if method != "power":
        raise ContractViolation(f"unknown spectral norm method {method!r}")

    cols = m.shape[1]
    gram = m.T @ m
    start = np.ones(cols) / np.sqrt(cols)
    sigma_sq = _power_iteration(gram, start, tol, max_iter)
    if sigma_sq <= 0.0:
        perturbed = np.ones(cols) + np.linspace(0.0, 1.0, cols) ** 2
        perturbed[0] = -perturbed[0]
        sigma_sq = _power_iteration(gram, perturbed / np.linalg.norm(perturbed), tol, max_iter)
    return float(np.sqrt(max(sigma_sq, 0.0)))


def _power_iteration(gram: np.ndarray, v: np.ndarray, tol: float, max_iter: int) -> float:
    estimate = float(v @ gram @ v)
    for _ in range(max_iter):
        w = gram @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        new_estimate = float(v @ gram @ v)
        if abs(new_estimate - estimate) <= tol * max(abs(new_estimate), 1e-300):
            return new_estimate
        estimate = new_estimate
    logger.warning("power iteration did not converge in %d iterations", max_iter)
    return estimate


def norm_2inf(x: np.ndarray) -> float:
    """Largest row Euclidean norm, ‖X‖_{2,∞}."""
    x = np.asarray(x)
    if x.size == 0:
        return 0.0
    return float(np.max(np.linalg.norm(x, axis=1)))
