"""Lesion detection and pixel overlap scores.

Candidates are the 8-connected components of a probability map at the
detection threshold. Each yields one detection at its probability-weighted
centroid, with the component's maximum probability as confidence.
"""
import logging
from typing import Dict, List, Mapping, NamedTuple, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy import ndimage

from app.core.exceptions import EmptyClassError

logger = logging.getLogger(__name__)

FP_RATES = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
CONNECTIVITY = np.ones((3, 3), dtype=int)


class Detection(NamedTuple):
    row: float
    col: float
    confidence: float


class FrocResult(BaseModel):
    """
    Lesion-level sensitivity at fixed mean false positives per slide.

    Attributes:
        fp_rates: Mean false positives per slide of each operating point
        sensitivities: Fraction of lesions detected at each operating point
        average: Mean of the sensitivities
        curve: Full (mean FP per slide, sensitivity) sweep, starting at (0, 0)
    """
    fp_rates: List[float] = Field(default_factory=lambda: list(FP_RATES))
    sensitivities: List[float]
    average: float = Field(..., ge=0.0, le=1.0)
    curve: List[Tuple[float, float]] = Field(default_factory=list)

    class Config:
        extra = "forbid"


def detections_from_map(prob_map: np.ndarray, threshold: float = 0.5) -> List[Detection]:
    prob_map = np.asarray(prob_map, dtype=np.float64)
    labeled, count = ndimage.label(prob_map >= threshold, structure=CONNECTIVITY)
    if count == 0:
        return []
    index = np.arange(1, count + 1)
    centroids = ndimage.center_of_mass(prob_map, labeled, index)
    maxima = ndimage.maximum(prob_map, labeled, index)
    detections = [Detection(float(r), float(c), float(m)) for (r, c), m in zip(centroids, maxima)]
    return sorted(detections, key=lambda d: -d.confidence)


def _lesion_keys(detections: Sequence[Detection], lesions: np.ndarray, offset: int) -> List[int]:
    h, w = lesions.shape
    keys = []
    for d in detections:
        r = min(max(int(round(d.row)), 0), h - 1)
        c = min(max(int(round(d.col)), 0), w - 1)
        label = int(lesions[r, c])
        keys.append(offset + label if label else -1)
    return keys


def froc(
    detections: Mapping[str, Sequence[Detection]],
    truth_masks: Mapping[str, np.ndarray],
    fp_rates: Sequence[float] = FP_RATES,
) -> FrocResult:
    """
    Sweep the confidence threshold over all detections of all slides.

    A detection inside a lesion marks that lesion found; further detections in
    the same lesion count neither as hits nor as false positives. Sensitivity
    at a target FP rate is the best sensitivity reached without exceeding it.
    """
    slide_ids = sorted(truth_masks)
    confidences, keys = [], []
    total_lesions = 0
    for slide_id in slide_ids:
        lesions, count = ndimage.label(np.asarray(truth_masks[slide_id]) > 0, structure=CONNECTIVITY)
        slide_detections = list(detections.get(slide_id, ()))
        keys.extend(_lesion_keys(slide_detections, lesions, total_lesions))
        confidences.extend(d.confidence for d in slide_detections)
        total_lesions += count
    if total_lesions == 0:
        raise EmptyClassError("FROC needs at least one ground-truth lesion")

    confidences = np.asarray(confidences, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.int64)
    order = np.argsort(-confidences, kind="stable")

    curve = [(0.0, 0.0)]
    found, false_positives = set(), 0
    i = 0
    while i < order.size:
        level = confidences[order[i]]
        while i < order.size and confidences[order[i]] == level:
            key = int(keys[order[i]])
            if key < 0:
                false_positives += 1
            else:
                found.add(key)
            i += 1
        curve.append((false_positives / len(slide_ids), len(found) / total_lesions))

    sensitivities = [max(s for fp, s in curve if fp <= rate) for rate in fp_rates]
    return FrocResult(
        fp_rates=list(fp_rates),
        sensitivities=sensitivities,
        average=float(np.mean(sensitivities)),
        curve=curve,
    )


def pixel_overlap(prob_map: np.ndarray, truth_mask: np.ndarray, threshold: float = 0.5) -> Tuple[float, float]:
    """(dice, iou) of the thresholded map against the mask; both empty scores (1, 1)."""
    predicted = np.asarray(prob_map) >= threshold
    truth = np.asarray(truth_mask) > 0
    intersection = int(np.logical_and(predicted, truth).sum())
    union = int(np.logical_or(predicted, truth).sum())
    if union == 0:
        return 1.0, 1.0
    dice = 2.0 * intersection / (int(predicted.sum()) + int(truth.sum()))
    return float(dice), intersection / union


def evaluate_maps(
    prob_maps: Mapping[str, np.ndarray],
    truth_masks: Mapping[str, np.ndarray],
    threshold: float = 0.5,
) -> Dict[str, Tuple[float, float]]:
    return {slide_id: pixel_overlap(prob_maps[slide_id], truth_masks[slide_id], threshold) for slide_id in sorted(prob_maps)}
