import logging
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from app.core.noise_model import LossSurface  # noqa: E402
from app.metrics.detection import FrocResult  # noqa: E402

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _save(fig, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    logger.info(f"Wrote figure {path}")
    return path


def plot_roc(points: Sequence[Tuple[float, float]], auc: float, path: PathLike) -> Path:
    fig, ax = plt.subplots(figsize=(4, 4))
    fpr, tpr = zip(*points)
    ax.plot(fpr, tpr, drawstyle="steps-post", label=f"AUC = {auc:.3f}")
    ax.plot([0, 1], [0, 1], linestyle=":", color="grey")
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower right")
    return _save(fig, path)


def plot_froc(result: FrocResult, path: PathLike) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    if result.curve:
        fp, sens = zip(*result.curve)
        ax.plot(fp, sens, drawstyle="steps-post", label="sweep")
    ax.scatter(result.fp_rates, result.sensitivities, color="C3", zorder=3,
               label=f"average = {result.average:.3f}")
    ax.set_xscale("log", base=2)
    ax.set_xlim(min(result.fp_rates) / 2, max(result.fp_rates) * 2)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("Mean false positives per slide")
    ax.set_ylabel("Lesion sensitivity")
    ax.legend(loc="lower right")
    return _save(fig, path)


def plot_overlay(
    pixels: np.ndarray,
    prob_map: np.ndarray,
    truth_mask: Optional[np.ndarray],
    path: PathLike,
    title: Optional[str] = None,
) -> Path:
    """Malign probability, blue to red, over the tissue with the lesion contour."""
    fig, ax = plt.subplots(figsize=(6, 6))
    tissue = pixels[..., :3] if pixels.shape[-1] >= 3 else pixels.mean(axis=-1)
    ax.imshow(np.clip(tissue, 0.0, 1.0), cmap=None if tissue.ndim == 3 else "gray", interpolation="nearest")
    heat = ax.imshow(prob_map, cmap="jet", vmin=0.0, vmax=1.0, alpha=0.45, interpolation="nearest")
    if truth_mask is not None and np.any(truth_mask):
        ax.contour(np.asarray(truth_mask, dtype=float), levels=[0.5], colors="white", linewidths=1.0)
    fig.colorbar(heat, ax=ax, fraction=0.046, pad=0.04, label="malign probability")
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_loss_surfaces(surface: LossSurface, grid: Sequence[float], bernoulli: np.ndarray, path: PathLike) -> Path:
    """Bernoulli loss over (p₁, q₁) next to the one-pixel expected loss over (θ₀, β₁)."""
    fig, (left, right) = plt.subplots(1, 2, figsize=(10, 4))
    g = np.asarray(grid)
    im = left.pcolormesh(g, g, bernoulli, shading="auto", cmap="viridis")
    left.set_xlabel("q₁")
    left.set_ylabel("p₁")
    fig.colorbar(im, ax=left)

    im = right.pcolormesh(surface.theta0_grid, surface.beta1_grid, surface.losses, shading="auto", cmap="viridis")
    right.plot(surface.optimal_theta0, surface.beta1_grid, color="white", linewidth=1.2, label="optimal θ₀")
    right.set_xlabel("θ₀")
    right.set_ylabel("β₁")
    right.legend(loc="upper right")
    fig.colorbar(im, ax=right)
    return _save(fig, path)
