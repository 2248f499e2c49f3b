"""Pixel softmax and slide-level logit aggregation.

Logit maps are arrays of shape (h, w, 2) with class 0 = benign and
class 1 = malign; batched variants take (B, h, w, 2).
"""
import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.special import expit

from app.core.exceptions import DomainError, ShapeError

logger = logging.getLogger(__name__)


def _check_logit_map(logits: np.ndarray, batched: bool = False) -> np.ndarray:
    logits = np.asarray(logits)
    expected = 4 if batched else 3
    if logits.ndim != expected or logits.shape[-1] != 2:
        raise ShapeError(f"expected logits of shape {'(B, h, w, 2)' if batched else '(h, w, 2)'}, got {logits.shape}")
    return logits


def pixel_softmax(logits: np.ndarray) -> np.ndarray:
    """Malign probability Q = σ(L₁ − L₀) of every pixel."""
    logits = np.asarray(logits)
    if logits.shape[-1] != 2:
        raise ShapeError(f"last axis must hold 2 classes, got {logits.shape}")
    return expit(logits[..., 1] - logits[..., 0])


def top_k_count(eta: float, pixel_count: int) -> int:
    """Nearest-rank size of the top-η set: max(1, round(η/100 · n)), halves rounded up."""
    if not 0.0 < eta <= 100.0:
        raise DomainError(f"eta must lie in (0, 100], got {eta}")
    return max(1, min(pixel_count, int(math.floor(eta / 100.0 * pixel_count + 0.5))))


@dataclass(frozen=True)
class SlideLogits:
    l0: float
    l1: float
    eta: float
    top_set: np.ndarray  # flat row-major indices of the pixels averaged into l1
    shape: Tuple[int, int]

    @property
    def top_coordinates(self) -> np.ndarray:
        rows, cols = np.unravel_index(self.top_set, self.shape)
        return np.stack([rows, cols], axis=-1)


def aggregate_batch(logits: np.ndarray, eta: float):
    """
    Batched aggregation.

    Returns:
        (l0, l1, top_index) with shapes (B,), (B,), (B, k). Ties at the cutoff
        go to the lower row-major index.
    """
    logits = _check_logit_map(logits, batched=True)
    batch, h, w, _ = logits.shape
    k = top_k_count(eta, h * w)
    flat = logits.reshape(batch, h * w, 2)
    l0 = flat[:, :, 0].mean(axis=1)
    order = np.argsort(-flat[:, :, 1], axis=1, kind="stable")
    top_index = order[:, :k]
    l1 = np.take_along_axis(flat[:, :, 1], top_index, axis=1).mean(axis=1)
    return l0, l1, top_index


def aggregate(logits: np.ndarray, eta: float) -> SlideLogits:
    """l₀ = mean benign logit, l₁ = mean of the top-η malign logits."""
    logits = _check_logit_map(logits)
    l0, l1, top_index = aggregate_batch(logits[None], eta)
    return SlideLogits(
        l0=float(l0[0]), l1=float(l1[0]), eta=eta, top_set=top_index[0], shape=logits.shape[:2]
    )


def aggregate_backward_batch(dl0: np.ndarray, dl1: np.ndarray, top_index: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Route slide-level gradients back to a (B, h, w, 2) logit gradient."""
    h, w = shape
    dl0 = np.asarray(dl0, dtype=np.float64)
    dl1 = np.asarray(dl1, dtype=np.float64)
    batch, k = top_index.shape
    if top_index.max(initial=-1) >= h * w:
        raise ShapeError(f"top-set index out of range for shape {shape}")
    grad = np.zeros((batch, h * w, 2))
    grad[:, :, 0] = (dl0 / (h * w))[:, None]
    np.put_along_axis(grad[:, :, 1], top_index, np.repeat((dl1 / k)[:, None], k, axis=1), axis=1)
    return grad.reshape(batch, h, w, 2)


def aggregate_backward(slide_grad: Tuple[float, float], slide_logits: SlideLogits, shape: Tuple[int, int]) -> np.ndarray:
    """Exact subgradient of ``aggregate`` with the top set held fixed."""
    if tuple(shape) != tuple(slide_logits.shape):
        raise ShapeError(f"shape {tuple(shape)} does not match aggregated map {slide_logits.shape}")
    dl0, dl1 = slide_grad
    grad = aggregate_backward_batch(
        np.array([dl0]), np.array([dl1]), slide_logits.top_set[None], tuple(shape)
    )
    return grad[0]


def slide_class_probs(slide_logits: SlideLogits) -> Tuple[float, float]:
    """Softmax over (l0, l1)."""
    diff = slide_logits.l1 - slide_logits.l0
    return float(expit(-diff)), float(expit(diff))
