"""β-generalized KL divergence and its gradient.

L_β(p‖q) = −Σᵢ (pᵢ/βᵢ)[(qᵢ/pᵢ)^βᵢ − 1], with the logarithmic limit
pᵢ log(pᵢ/qᵢ) for βᵢ = 0. Terms with pᵢ = 0 contribute nothing.
"""
import logging
from typing import Sequence, Union

import numpy as np

from app.core.exceptions import DomainError, InfiniteDivergenceError

logger = logging.getLogger(__name__)

ArrayLike = Union[Sequence[float], np.ndarray]

DIST_TOLERANCE = 1e-9


def as_distribution(values: ArrayLike, name: str = "p") -> np.ndarray:
    """Validate a discrete distribution (K ≥ 2, entries in [0,1], unit sum)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 2:
        raise DomainError(f"{name} must be a vector with at least 2 entries")
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise DomainError(f"{name} entries must lie in [0, 1]")
    if abs(arr.sum() - 1.0) > DIST_TOLERANCE:
        raise DomainError(f"{name} must sum to 1 (got {arr.sum():.12g})")
    return arr


def _beta_vector(beta: ArrayLike, size: int) -> np.ndarray:
    b = np.asarray(beta, dtype=np.float64)
    if b.ndim == 0:
        b = np.full(size, float(b))
    if b.shape != (size,):
        raise DomainError(f"beta must have {size} entries, got shape {b.shape}")
    if np.any(b < 0.0) or np.any(b > 1.0):
        raise DomainError("beta entries must lie in [0, 1]")
    return b


def _check_pair(p: ArrayLike, q: ArrayLike, beta: ArrayLike):
    p = as_distribution(p, "p")
    q = as_distribution(q, "q")
    if p.shape != q.shape:
        raise DomainError(f"p and q lengths differ ({p.size} vs {q.size})")
    b = _beta_vector(beta, p.size)
    singular = (p > 0.0) & (q == 0.0) & (b == 0.0)
    if np.any(singular):
        raise InfiniteDivergenceError(
            f"q is zero where p is positive on classes {np.flatnonzero(singular).tolist()} with beta 0"
        )
    return p, q, b


def divergence_terms(p: np.ndarray, q: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-entry terms of L_β, broadcasting over leading axes. No validation."""
    p, q, b = np.broadcast_arrays(
        np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64), np.asarray(b, dtype=np.float64)
    )
    terms = np.zeros(p.shape)
    active = p > 0.0
    log_mask = active & (b == 0.0)
    pow_mask = active & (b > 0.0)
    if np.any(log_mask):
        pl, ql = p[log_mask], q[log_mask]
        terms[log_mask] = pl * (np.log(pl) - np.log(ql))
    if np.any(pow_mask):
        pp, qp, bp = p[pow_mask], q[pow_mask], b[pow_mask]
        # expm1 keeps the small-β regime accurate
        with np.errstate(divide="ignore"):
            terms[pow_mask] = -(pp / bp) * np.expm1(bp * (np.log(qp) - np.log(pp)))
    return terms


def divergence_grad_terms(p: np.ndarray, q: np.ndarray, b: np.ndarray) -> np.ndarray:
    """∂L_β/∂qᵢ = −(qᵢ/pᵢ)^(βᵢ−1), zero where pᵢ = 0. No validation."""
    p, q, b = np.broadcast_arrays(
        np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64), np.asarray(b, dtype=np.float64)
    )
    grad = np.zeros(p.shape)
    active = p > 0.0
    if np.any(active):
        pa, qa, ba = p[active], q[active], b[active]
        with np.errstate(divide="ignore", invalid="ignore"):
            exponent = np.where(ba == 1.0, 0.0, (ba - 1.0) * (np.log(qa) - np.log(pa)))
        grad[active] = -np.exp(exponent)
    return grad


def beta_divergence(p: ArrayLike, q: ArrayLike, beta: ArrayLike) -> float:
    """
    Compute L_β(p‖q).

    Args:
        p: True distribution
        q: Model distribution
        beta: Per-class exponents in [0, 1] (a scalar applies to every class)

    Returns:
        The divergence; it equals KL(p‖q) when beta is 0.
    """
    p, q, b = _check_pair(p, q, beta)
    return float(divergence_terms(p, q, b).sum())


def beta_divergence_grad_q(p: ArrayLike, q: ArrayLike, beta: ArrayLike) -> np.ndarray:
    """Gradient of L_β(p‖q) with respect to q."""
    p, q, b = _check_pair(p, q, beta)
    return divergence_grad_terms(p, q, b)


def kl_divergence(p: ArrayLike, q: ArrayLike) -> float:
    return beta_divergence(p, q, 0.0)
