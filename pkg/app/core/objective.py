import logging
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy.special import expit

from app.core.aggregation import aggregate_backward_batch, aggregate_batch
from app.core.divergence import divergence_grad_terms, divergence_terms
from app.schemas.config import BetaParams

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass
class PatchLoss:
    loss: float  # batch mean
    per_patch: np.ndarray
    q1: np.ndarray
    grad_logits: np.ndarray  # d(batch mean loss) / d(logits), shape (B, h, w, 2)


def patch_loss_and_grad(
    logits: np.ndarray,
    labels: Sequence[int],
    beta: Union[BetaParams, Sequence[float]],
    eta: float,
) -> PatchLoss:
    """
    Weakly supervised patch loss and its gradient.

    Each patch is scored as a small slide: logits are aggregated (mean benign,
    top-η malign), turned into (q0, q1) by softmax, clamped to
    [1e-7, 1 − 1e-7] and compared to the one-hot inherited label with L_β.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b = np.asarray(beta.as_tuple() if isinstance(beta, BetaParams) else beta, dtype=np.float64)
    batch, h, w, _ = logits.shape

    l0, l1, top_index = aggregate_batch(logits, eta)
    diff = l1 - l0
    q = np.stack([expit(-diff), expit(diff)], axis=-1)
    clamped = np.clip(q, PROB_CLAMP, 1.0 - PROB_CLAMP)
    target = np.eye(2)[labels]

    per_patch = divergence_terms(target, clamped, b).sum(axis=-1)
    dq = divergence_grad_terms(target, clamped, b)
    dq = np.where(clamped == q, dq, 0.0)

    # dq1/d(diff) = q0·q1 and dq0/d(diff) = −q0·q1
    ddiff = (dq[:, 1] - dq[:, 0]) * q[:, 0] * q[:, 1] / batch
    grad = aggregate_backward_batch(-ddiff, ddiff, top_index, (h, w))
    return PatchLoss(loss=float(per_patch.mean()), per_patch=per_patch, q1=q[:, 1], grad_logits=grad)
