"""Synthetic whole-slide images with exact pixel ground truth.

Benign slides hold a smooth correlated texture only. Malign slides add
elliptical lesion blobs whose pixels are shifted by ``lesion_contrast`` on one
channel. Every slide is generated from its own stream spawned from the master
seed, so slides are reproducible independently of each other.
"""
import logging
from dataclasses import dataclass, replace
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from app.core.exceptions import DomainError, InfeasibleSpecError, ShapeError
from app.core.rng import SeedLike, as_generator, spawn
from app.sampler.patches import PatchDistribution, sample_patch_centers, uniform_distribution
from app.sampler.slides import BENIGN, MALIGN
from app.schemas.config import DatasetSpec

logger = logging.getLogger(__name__)

DIHEDRAL_ORDER = 8


@dataclass(frozen=True)
class SyntheticSlide:
    slide_id: str
    pixels: np.ndarray  # (h, w, c) float32 in [0, 1]
    truth_mask: np.ndarray  # (h, w) uint8, 1 = malign pixel
    label: int
    seed_index: int

    @property
    def shape(self) -> Tuple[int, int]:
        return self.truth_mask.shape

    @property
    def lesion_pixels(self) -> int:
        return int(self.truth_mask.sum())

    @property
    def lesion_fraction(self) -> float:
        return self.lesion_pixels / self.truth_mask.size


@dataclass(frozen=True)
class Patch:
    """A training patch. ``truth_window`` is for evaluation and never reaches the loss."""
    pixels: np.ndarray  # (s, s, c)
    label: int
    truth_window: np.ndarray  # (s, s) uint8
    slide_id: str
    center: Tuple[int, int]
    origin: Tuple[int, int]
    transform: int = 0

    @property
    def is_noisy(self) -> bool:
        """Malign label without a single malign pixel."""
        return self.label == MALIGN and not self.truth_window.any()


class GammaEstimate(NamedTuple):
    value: float
    stderr: float
    n: int


def slide_name(index: int) -> str:
    return f"slide_{index:04d}"


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _background(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal((spec.height, spec.width, spec.channels))
    smooth = ndimage.gaussian_filter(noise, sigma=(spec.correlation_length, spec.correlation_length, 0), mode="wrap")
    smooth -= smooth.mean(axis=(0, 1), keepdims=True)
    std = smooth.std(axis=(0, 1), keepdims=True)
    smooth = np.divide(smooth, std, out=np.zeros_like(smooth), where=std > 0)
    return 0.5 + spec.noise_scale * smooth


def _lesion_mask(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    """Rasterize blobs so that the total lesion area is met exactly."""
    h, w = spec.height, spec.width
    fraction = rng.uniform(spec.lesion_fraction_min, spec.lesion_fraction_max)
    total = int(np.floor(fraction * h * w + 0.5))
    blobs = int(rng.integers(spec.blob_count_min, spec.blob_count_max + 1))
    blobs = max(1, min(blobs, total))
    total = max(total, blobs)
    sizes = 1 + rng.multinomial(total - blobs, rng.dirichlet(np.ones(blobs)))

    mask = np.zeros((h, w), dtype=bool)
    rows, cols = np.mgrid[0:h, 0:w]
    flat_index = np.arange(h * w)
    border = ndimage.distance_transform_edt(np.pad(np.ones((h, w)), 1))[1:-1, 1:-1]

    for size in sizes:
        radius = np.sqrt(size / np.pi)
        aspect = rng.uniform(0.5, 2.0)
        a, b = radius * np.sqrt(aspect), radius / np.sqrt(aspect)
        angle = rng.uniform(0.0, np.pi)

        free = ~mask
        candidates = np.flatnonzero(free & (border >= min(radius, border.max())))
        if candidates.size == 0:
            candidates = np.flatnonzero(free)
        cy, cx = np.unravel_index(candidates[rng.integers(candidates.size)], (h, w))

        du, dv = rows - cy, cols - cx
        u = du * np.cos(angle) + dv * np.sin(angle)
        v = -du * np.sin(angle) + dv * np.cos(angle)
        dist = ((u / a) ** 2 + (v / b) ** 2).ravel()
        dist[mask.ravel()] = np.inf
        order = np.lexsort((flat_index, dist))
        mask.flat[order[:size]] = True
    return mask


def generate_slide(spec: DatasetSpec, index: int, label: int) -> SyntheticSlide:
    rng = spawn(spec.seed, 1, index)
    pixels = _background(spec, rng)
    mask = np.zeros((spec.height, spec.width), dtype=bool)
    if label == MALIGN:
        mask = _lesion_mask(spec, rng)
        pixels[..., spec.lesion_channel][mask] += spec.lesion_contrast
    pixels = np.clip(pixels, 0.0, 1.0).astype(np.float32)
    return SyntheticSlide(
        slide_id=slide_name(index),
        pixels=_frozen(pixels),
        truth_mask=_frozen(mask.astype(np.uint8)),
        label=label,
        seed_index=index,
    )


def assign_labels(spec: DatasetSpec) -> np.ndarray:
    """Exactly round(r · n) benign slides, placed by a seeded permutation."""
    n = spec.slide_count
    benign = int(np.floor(spec.benign_fraction * n + 0.5))
    labels = np.full(n, MALIGN, dtype=int)
    labels[:benign] = BENIGN
    return spawn(spec.seed, 0).permutation(labels)


def generate_dataset(spec: DatasetSpec) -> List[SyntheticSlide]:
    max_area = int(np.floor(spec.lesion_fraction_max * spec.height * spec.width + 0.5))
    if spec.blob_count_min > max_area:
        raise InfeasibleSpecError(
            f"{spec.blob_count_min} blobs cannot fit in a lesion area of {max_area} pixels"
        )
    labels = assign_labels(spec)
    slides = [generate_slide(spec, i, int(label)) for i, label in enumerate(labels)]
    logger.info(
        f"Generated {len(slides)} slides ({int((labels == BENIGN).sum())} benign, "
        f"{int((labels == MALIGN).sum())} malign) of size {spec.height}x{spec.width}"
    )
    return slides


def clamp_window(center: Sequence[int], size: int, shape: Tuple[int, int]) -> Tuple[int, int]:
    """Top-left corner of the size×size window around ``center``, shifted inward to fit."""
    h, w = shape
    if size < 1 or size > min(h, w):
        raise ShapeError(f"patch size {size} does not fit a {h}x{w} slide")
    top = min(max(int(center[0]) - size // 2, 0), h - size)
    left = min(max(int(center[1]) - size // 2, 0), w - size)
    return top, left


def extract_patch(slide: SyntheticSlide, center: Sequence[int], size: int) -> Patch:
    top, left = clamp_window(center, size, slide.shape)
    window = (slice(top, top + size), slice(left, left + size))
    return Patch(
        pixels=slide.pixels[window].copy(),
        label=slide.label,
        truth_window=slide.truth_mask[window].copy(),
        slide_id=slide.slide_id,
        center=(int(center[0]), int(center[1])),
        origin=(top, left),
    )


def empty_window_map(truth_mask: np.ndarray, size: int) -> np.ndarray:
    """For every center pixel, whether its clamped window holds no malign pixel."""
    h, w = truth_mask.shape
    clamp_window((0, 0), size, (h, w))
    table = np.zeros((h + 1, w + 1), dtype=np.int64)
    table[1:, 1:] = truth_mask.astype(np.int64).cumsum(axis=0).cumsum(axis=1)
    window_sums = (
        table[size:, size:] - table[:-size, size:] - table[size:, :-size] + table[:-size, :-size]
    )
    tops = np.clip(np.arange(h) - size // 2, 0, h - size)
    lefts = np.clip(np.arange(w) - size // 2, 0, w - size)
    return window_sums[np.ix_(tops, lefts)] == 0


def _require_malign(slide: SyntheticSlide):
    if slide.label != MALIGN:
        raise DomainError(f"label noise is only defined on malign slides, {slide.slide_id} is benign")


def empirical_gamma(
    slide: SyntheticSlide,
    size: int,
    dist: PatchDistribution,
    n: int,
    rng_seed: SeedLike = None,
) -> GammaEstimate:
    """Monte-Carlo fraction of sampled patches that hold no malign pixel."""
    _require_malign(slide)
    centers = sample_patch_centers(dist, n, rng_seed)
    empty = empty_window_map(slide.truth_mask, size)[centers[:, 0], centers[:, 1]]
    value = float(empty.mean())
    return GammaEstimate(value=value, stderr=float(np.sqrt(value * (1.0 - value) / n)), n=n)


def exact_gamma(slide: SyntheticSlide, size: int, dist: PatchDistribution) -> float:
    _require_malign(slide)
    empty = empty_window_map(slide.truth_mask, size)
    return float((dist.weights * empty).sum())


def uniform_gamma(slide: SyntheticSlide, size: int) -> float:
    return exact_gamma(slide, size, uniform_distribution(slide.shape, slide.slide_id))


def batch_gamma(patches: Sequence[Patch]) -> Optional[float]:
    """Fraction of malign-labeled patches in a batch without malign pixels."""
    malign = [p for p in patches if p.label == MALIGN]
    if not malign:
        return None
    return sum(p.is_noisy for p in malign) / len(malign)


def dihedral(arr: np.ndarray, index: int) -> np.ndarray:
    """Element ``index`` of the dihedral group on the two leading axes.

    0..3 rotate by index·90°, 4..7 mirror left-right after that rotation.
    """
    if not 0 <= index < DIHEDRAL_ORDER:
        raise DomainError(f"dihedral index must lie in [0, 8), got {index}")
    out = np.rot90(arr, k=index % 4, axes=(0, 1))
    if index >= 4:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def apply_transform(patch: Patch, index: int) -> Patch:
    if patch.pixels.shape[0] != patch.pixels.shape[1]:
        raise ShapeError(f"augmentation needs a square patch, got {patch.pixels.shape[:2]}")
    return replace(
        patch,
        pixels=dihedral(patch.pixels, index),
        truth_window=dihedral(patch.truth_window, index),
        transform=index,
    )


def augment(patch: Patch, rng_seed: SeedLike = None) -> Patch:
    rng = as_generator(rng_seed)
    return apply_transform(patch, int(rng.integers(DIHEDRAL_ORDER)))


def dataset_summary(slides: Sequence[SyntheticSlide], patch_size: int) -> List[dict]:
    rows = []
    for slide in slides:
        rows.append({
            "slide_id": slide.slide_id,
            "label": "malign" if slide.label == MALIGN else "benign",
            "lesion_pixels": slide.lesion_pixels,
            "lesion_fraction": slide.lesion_fraction,
            "uniform_gamma": uniform_gamma(slide, patch_size) if slide.label == MALIGN else None,
        })
    return rows
