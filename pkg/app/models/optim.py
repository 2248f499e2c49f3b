import logging
from typing import Dict, Optional, Tuple

import numpy as np

from app.models.network import Weights
from app.schemas.config import TrainStep

logger = logging.getLogger(__name__)

Gradients = Dict[str, np.ndarray]


def global_norm(grads: Gradients) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_gradients(grads: Gradients, max_norm: float) -> Tuple[Gradients, float]:
    """Scale all gradients together so their global norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if not np.isfinite(norm):
        raise FloatingPointError(f"non-finite gradient norm {norm}")
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype, copy=False) for k, g in grads.items()}, norm


def sgd_step(
    weights: Weights,
    grads: Gradients,
    train_step: TrainStep,
    velocity: Optional[Gradients] = None,
) -> Tuple[Weights, Gradients]:
    """
    One SGD update with optional momentum.

    v ← μ·v + g;  w ← w − lr·v

    Returns:
        The new weight snapshot (version + 1) and the new velocity.
    """
    lr = train_step.learning_rate
    mu = train_step.momentum
    tensors, new_velocity = {}, {}
    for name, w in weights.tensors.items():
        g = np.asarray(grads[name], dtype=w.dtype)
        v = g if velocity is None or mu == 0.0 else (mu * velocity[name] + g).astype(w.dtype)
        new_velocity[name] = v
        tensors[name] = (w - lr * v).astype(w.dtype)
    return weights.with_tensors(tensors, version=weights.version + 1), new_velocity


class SGDOptimizer:
    """Mutable optimizer state owned by the training worker."""

    def __init__(self, train_step: TrainStep):
        self.train_step = train_step
        self.velocity: Optional[Gradients] = None
        self.last_norm = 0.0

    def step(self, weights: Weights, grads: Gradients) -> Weights:
        grads, self.last_norm = clip_gradients(grads, self.train_step.clip_norm)
        if self.last_norm > self.train_step.clip_norm:
            logger.debug(f"Clipped gradient norm {self.last_norm:.3f} to {self.train_step.clip_norm}")
        weights, self.velocity = sgd_step(weights, grads, self.train_step, self.velocity)
        return weights
