import logging
from typing import List, Mapping, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from sklearn.metrics import roc_auc_score, roc_curve

from app.core.exceptions import EmptyClassError

logger = logging.getLogger(__name__)


class SlideScore(BaseModel):
    """
    Slide-level prediction.

    Attributes:
        slide_id: Slide identifier
        score: Maximum malign pixel probability of the slide's map
        label: True slide label (0 = benign, 1 = malign)
    """
    slide_id: str
    score: float = Field(..., ge=0.0, le=1.0)
    label: int = Field(..., ge=0, le=1)

    class Config:
        extra = "forbid"
        frozen = True
        json_schema_extra = {"example": {"slide_id": "slide_0003", "score": 0.91, "label": 1}}


def score_slide(slide_id: str, prob_map: np.ndarray, label: int) -> SlideScore:
    return SlideScore(slide_id=slide_id, score=float(np.max(prob_map)), label=label)


def score_slides(prob_maps: Mapping[str, np.ndarray], labels: Mapping[str, int]) -> List[SlideScore]:
    return [score_slide(slide_id, prob_maps[slide_id], labels[slide_id]) for slide_id in sorted(prob_maps)]


def _arrays(scores: Sequence[SlideScore]) -> Tuple[np.ndarray, np.ndarray]:
    labels = np.array([s.label for s in scores])
    if len(set(labels.tolist())) < 2:
        raise EmptyClassError("ROC analysis needs both benign and malign slides")
    return labels, np.array([s.score for s in scores])


def roc_auc(scores: Sequence[SlideScore]) -> float:
    """Area under the ROC curve; tied scores count one half."""
    labels, values = _arrays(scores)
    return float(roc_auc_score(labels, values))


def roc_points(scores: Sequence[SlideScore]) -> List[Tuple[float, float]]:
    """(false positive rate, true positive rate) pairs, starting at (0, 0)."""
    labels, values = _arrays(scores)
    fpr, tpr, _ = roc_curve(labels, values, drop_intermediate=False)
    return [(float(x), float(y)) for x, y in zip(fpr, tpr)]
