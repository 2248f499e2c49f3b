"""Closed-form analysis of the one-pixel model under label noise.

A benign slide yields pixel X = 0 with probability 1, a malign slide yields
X = 0 with probability γ. The model predicts P(malign | X = k) = θₖ and is
scored with L_β against the one-hot label of the slide the pixel came from.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import optimize

from app.core.divergence import beta_divergence, divergence_grad_terms, divergence_terms
from app.core.exceptions import DomainError, RootNotBracketedError
from app.schemas.config import BetaParams, NoiseSetting, TrivialModelParams

logger = logging.getLogger(__name__)

BRACKET_EPS = 1e-12
BISECTION_TOL = 1e-10
THETA_CLAMP = 1e-7

BENIGN = np.array([1.0, 0.0])
MALIGN = np.array([0.0, 1.0])


def _bernoulli(theta: float) -> np.ndarray:
    return np.array([1.0 - theta, theta])


def trivial_model_expected_loss(theta: TrivialModelParams, noise: NoiseSetting, beta: BetaParams) -> float:
    """E_X[L_β(p‖q)] of the one-pixel model."""
    b = beta.as_tuple()
    q0 = _bernoulli(theta.theta0)
    q1 = _bernoulli(theta.theta1)
    return (
        noise.r * beta_divergence(BENIGN, q0, b)
        + (1.0 - noise.r) * noise.gamma * beta_divergence(MALIGN, q0, b)
        + (1.0 - noise.r) * (1.0 - noise.gamma) * beta_divergence(MALIGN, q1, b)
    )


def trivial_model_stationarity_residual(theta0: float, noise: NoiseSetting, beta: BetaParams) -> float:
    """
    (1−r)γθ₀^(β₁−1) − r(1−θ₀)^(β₀−1).

    This is the negated derivative of the expected loss in θ₀; it is
    positive left of the minimizer and negative right of it.
    """
    if not 0.0 < theta0 < 1.0:
        raise DomainError(f"theta0 must lie in (0, 1), got {theta0}")
    return (1.0 - noise.r) * noise.gamma * theta0 ** (beta.beta1 - 1.0) - noise.r * (1.0 - theta0) ** (beta.beta0 - 1.0)


def closed_form_kl_theta0(noise: NoiseSetting) -> float:
    """Minimizer of the expected KL loss: (1−r)γ / (r + (1−r)γ)."""
    weight = (1.0 - noise.r) * noise.gamma
    return weight / (noise.r + weight)


def optimal_theta0(noise: NoiseSetting, beta: BetaParams) -> float:
    """Root of the stationarity residual in (0, 1), found by bisection."""
    if noise.gamma <= 0.0:
        raise DomainError("optimal_theta0 requires gamma > 0")

    def residual(t: float) -> float:
        return trivial_model_stationarity_residual(t, noise, beta)

    lo, hi = BRACKET_EPS, 1.0 - BRACKET_EPS
    f_lo, f_hi = residual(lo), residual(hi)
    if np.sign(f_lo) == np.sign(f_hi):
        raise RootNotBracketedError(
            f"stationarity residual does not change sign on ({lo}, {hi}) "
            f"for gamma={noise.gamma}, r={noise.r}, beta={beta.as_tuple()}"
        )
    return float(optimize.bisect(residual, lo, hi, xtol=BISECTION_TOL, maxiter=200))


def tune_beta1(theta0_target: float, beta0: float, noise: NoiseSetting) -> float:
    """
    β₁ placing the minimizer of the expected loss at ``theta0_target``.

    β₁ = [(β₀−1)·log(1−θ₀) − log((1−r)γ/r)] / log θ₀ + 1
    """
    if not 0.0 < theta0_target < 1.0:
        raise DomainError(f"theta0_target must lie in (0, 1), got {theta0_target}")
    if not 0.0 <= beta0 < 1.0:
        raise DomainError(f"beta0 must lie in [0, 1), got {beta0}")
    if noise.gamma <= 0.0:
        raise DomainError("tune_beta1 requires gamma > 0")
    log_t = np.log(theta0_target)
    value = ((beta0 - 1.0) * np.log1p(-theta0_target) - np.log((1.0 - noise.r) * noise.gamma / noise.r)) / log_t + 1.0
    if not 0.0 <= value <= 1.0:
        logger.warning(f"Tuned beta1={value:.4f} lies outside [0, 1]; target theta0={theta0_target} is not reachable")
    return float(value)


@dataclass
class LossSurface:
    theta0_grid: np.ndarray
    beta1_grid: np.ndarray
    losses: np.ndarray  # shape (len(beta1_grid), len(theta0_grid))
    optimal_theta0: np.ndarray  # NaN where no interior optimum exists


def expected_loss_surface(
    noise: NoiseSetting,
    beta0: float,
    theta0_grid: Sequence[float],
    beta1_grid: Sequence[float],
    theta1: float = 1.0 - THETA_CLAMP,
) -> LossSurface:
    """Expected loss over (θ₀, β₁) with the optimal θ₀ per β₁."""
    theta0_grid = np.asarray(theta0_grid, dtype=np.float64)
    beta1_grid = np.asarray(beta1_grid, dtype=np.float64)
    losses = np.empty((beta1_grid.size, theta0_grid.size))
    optimum = np.full(beta1_grid.size, np.nan)
    for i, b1 in enumerate(beta1_grid):
        beta = BetaParams(beta0=beta0, beta1=float(b1))
        for j, t0 in enumerate(theta0_grid):
            losses[i, j] = trivial_model_expected_loss(
                TrivialModelParams(theta0=float(t0), theta1=theta1), noise, beta
            )
        try:
            optimum[i] = optimal_theta0(noise, beta)
        except RootNotBracketedError:
            logger.debug(f"No interior optimum for beta1={b1}")
    return LossSurface(theta0_grid=theta0_grid, beta1_grid=beta1_grid, losses=losses, optimal_theta0=optimum)


def bernoulli_loss_grid(beta: BetaParams, grid: Sequence[float]) -> np.ndarray:
    """L_β between Bernoulli(p₁) and Bernoulli(q₁); rows index p₁, columns q₁."""
    g = np.asarray(grid, dtype=np.float64)
    p = np.stack([1.0 - g, g], axis=-1)[:, None, :]
    q = np.stack([1.0 - g, g], axis=-1)[None, :, :]
    return divergence_terms(p, q, np.array(beta.as_tuple())).sum(axis=-1)


def sample_trivial_data(noise: NoiseSetting, n: int, rng: np.random.Generator):
    """Draw (pixel, label) pairs from the one-pixel generative process."""
    malign = rng.random(n) >= noise.r
    pixel = np.where(malign, (rng.random(n) >= noise.gamma).astype(np.int64), 0)
    return pixel, malign.astype(np.int64)


@dataclass
class TrivialFit:
    trajectory: np.ndarray  # (steps + 1, 2) values of (θ₀, θ₁)

    def tail_mean(self, fraction: float = 0.1) -> np.ndarray:
        count = max(1, int(round(fraction * (len(self.trajectory) - 1))))
        return self.trajectory[-count:].mean(axis=0)


def fit_trivial_model(
    noise: NoiseSetting,
    beta: BetaParams,
    steps: int = 5000,
    batch_size: int = 64,
    learning_rate: float = 0.01,
    seed: int = 0,
    init: Optional[TrivialModelParams] = None,
) -> TrivialFit:
    """Minimize the expected loss of the one-pixel model by minibatch SGD."""
    rng = np.random.default_rng(seed)
    theta = np.array([0.5, 0.5] if init is None else [init.theta0, init.theta1])
    b = np.array(beta.as_tuple())
    trajectory = np.empty((steps + 1, 2))
    trajectory[0] = theta
    for step in range(steps):
        pixel, label = sample_trivial_data(noise, batch_size, rng)
        t = theta[pixel]
        q = np.stack([1.0 - t, t], axis=-1)
        p = np.eye(2)[label]
        g = divergence_grad_terms(p, q, b)
        dtheta = g[:, 1] - g[:, 0]
        grad = np.bincount(pixel, weights=dtheta, minlength=2) / batch_size
        theta = np.clip(theta - learning_rate * grad, THETA_CLAMP, 1.0 - THETA_CLAMP)
        trajectory[step + 1] = theta
    logger.debug(f"Trivial model fit finished at theta={theta}")
    return TrivialFit(trajectory=trajectory)
