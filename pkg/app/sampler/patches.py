import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from app.core.exceptions import DomainError
from app.core.rng import SeedLike, as_generator

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PatchDistribution:
    """Normalized sampling weights over the pixels of one slide."""
    weights: np.ndarray  # (h, w), sums to 1
    alpha: float
    slide_id: Optional[str] = None

    @property
    def shape(self):
        return self.weights.shape

    def entropy(self) -> float:
        w = self.weights[self.weights > 0]
        return float(-(w * np.log(w)).sum())


def patch_distribution(prob_map: np.ndarray, alpha: float, slide_id: Optional[str] = None) -> PatchDistribution:
    """
    P(i, j) = Q_ij^α / Σ Q_uv^α.

    Uses 0^0 = 1, so α = 0 is exactly uniform. A map that is zero everywhere
    (or underflows to zero) falls back to uniform.
    """
    if alpha < 0:
        raise DomainError(f"alpha must be non-negative, got {alpha}")
    q = np.asarray(prob_map, dtype=np.float64)
    if q.ndim != 2:
        raise DomainError(f"probability map must be 2-D, got shape {q.shape}")
    if alpha == 0:
        weights = np.ones_like(q)
    else:
        weights = np.power(np.clip(q, 0.0, 1.0), alpha)
    total = weights.sum()
    if not total > 0:
        logger.debug(f"Probability map of slide {slide_id} has no mass at alpha={alpha}; using uniform weights")
        weights = np.ones_like(q)
        total = weights.sum()
    weights = weights / total
    weights.setflags(write=False)
    return PatchDistribution(weights=weights, alpha=float(alpha), slide_id=slide_id)


def uniform_distribution(shape, slide_id: Optional[str] = None) -> PatchDistribution:
    return patch_distribution(np.ones(shape), 0.0, slide_id)


def sample_patch_centers(dist: PatchDistribution, n: int, rng_seed: SeedLike = None) -> np.ndarray:
    """
    Draw n i.i.d. pixel coordinates by inverse CDF over the row-major weights.

    Returns:
        Integer array of shape (n, 2) holding (row, col).
    """
    if n < 1:
        raise DomainError(f"n must be at least 1, got {n}")
    rng = as_generator(rng_seed)
    cdf = np.cumsum(dist.weights.ravel())
    u = rng.random(n) * cdf[-1]
    flat = np.minimum(np.searchsorted(cdf, u, side="right"), cdf.size - 1)
    rows, cols = np.unravel_index(flat, dist.shape)
    return np.stack([rows, cols], axis=-1)
