"""Error-driven slide selection for the mapping process.

Malign and benign slides are drawn at the same rate. Benign slides are
weighted by the total malign probability of their latest map (false
positive mass), and every slide is revisited at least once every N epochs.
"""
import logging
import threading
from collections import Counter
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import EmptyClassError
from app.core.rng import SeedLike, as_generator

logger = logging.getLogger(__name__)

BENIGN, MALIGN = 0, 1
DEFAULT_MAP_VALUE = 0.5


class SlideSelectionState:
    """
    Shared selection state: latest map sums, visit bookkeeping and epochs.

    An epoch ends each time as many slides have been processed as the
    dataset holds. A slide is overdue once ``epoch - last_visit >= N``; slides
    never visited are overdue from the start. Overdue slides are served
    first, oldest visit first.
    """

    def __init__(self, slide_ids: Sequence[str], labels: Sequence[int], shapes: Sequence[Tuple[int, int]], staleness_epochs: int = 4):
        if len(slide_ids) != len(labels) or len(slide_ids) != len(shapes):
            raise ValueError("slide_ids, labels and shapes must have equal length")
        self.slide_ids: List[str] = list(slide_ids)
        self.labels: Dict[str, int] = dict(zip(slide_ids, labels))
        self.shapes: Dict[str, Tuple[int, int]] = dict(zip(slide_ids, shapes))
        self.staleness_epochs = staleness_epochs
        self.map_sums: Dict[str, Optional[float]] = {s: None for s in slide_ids}
        self.last_visit: Dict[str, Optional[int]] = {s: None for s in slide_ids}
        self.epoch = 0
        self.processed_in_epoch = 0
        self.visit_counts: Dict[int, Counter] = {}
        self.visit_epochs: Dict[str, List[int]] = {s: [] for s in slide_ids}
        self._lock = threading.Lock()

    def ids_with_label(self, label: int) -> List[str]:
        return [s for s in self.slide_ids if self.labels[s] == label]

    def update_map(self, slide_id: str, prob_map: np.ndarray) -> None:
        """Record the malign mass of a newly published map."""
        total = float(np.asarray(prob_map, dtype=np.float64).sum())
        with self._lock:
            self.map_sums[slide_id] = total

    def default_sum(self, slide_id: str) -> float:
        h, w = self.shapes[slide_id]
        return DEFAULT_MAP_VALUE * h * w

    def overdue(self) -> List[str]:
        with self._lock:
            return self._overdue()

    def _overdue(self) -> List[str]:
        never = [s for s in self.slide_ids if self.last_visit[s] is None]
        stale = [
            s for s in self.slide_ids
            if self.last_visit[s] is not None and self.epoch - self.last_visit[s] >= self.staleness_epochs
        ]
        stale.sort(key=lambda s: self.last_visit[s])
        return never + stale

    def record_visit(self, slide_id: str) -> None:
        with self._lock:
            self._record_visit(slide_id)

    def _record_visit(self, slide_id: str) -> None:
        self.last_visit[slide_id] = self.epoch
        self.visit_counts.setdefault(self.epoch, Counter())[slide_id] += 1
        self.visit_epochs[slide_id].append(self.epoch)
        self.processed_in_epoch += 1
        if self.processed_in_epoch >= len(self.slide_ids):
            self.epoch += 1
            self.processed_in_epoch = 0
            logger.debug(f"Mapping schedule entered epoch {self.epoch}")

    def max_visit_gap(self) -> int:
        """Largest number of epochs between consecutive visits of any slide.

        The run start counts as a visit at epoch -1 and the current epoch
        closes the last interval.
        """
        with self._lock:
            gaps = [
                int(np.max(np.diff([-1] + epochs + [self.epoch])))
                for epochs in self.visit_epochs.values()
            ]
        return max(gaps) if gaps else 0

    def stats_rows(self) -> List[dict]:
        with self._lock:
            return [
                {"epoch": epoch, "slide_id": s, "visits": counts.get(s, 0)}
                for epoch, counts in sorted(self.visit_counts.items())
                for s in self.slide_ids
            ]


def benign_slide_distribution(state: SlideSelectionState) -> Dict[str, float]:
    """P(S = s | benign) proportional to the slide's latest malign mass."""
    benign = state.ids_with_label(BENIGN)
    if not benign:
        raise EmptyClassError("dataset holds no benign slide")
    sums = np.array([
        state.map_sums[s] if state.map_sums[s] is not None else state.default_sum(s) for s in benign
    ])
    total = sums.sum()
    probs = sums / total if total > 0 else np.full(len(benign), 1.0 / len(benign))
    return dict(zip(benign, probs.tolist()))


def next_slide(state: SlideSelectionState, rng_seed: SeedLike = None) -> str:
    """Pick the next slide to map and record the visit."""
    rng = as_generator(rng_seed)
    malign = state.ids_with_label(MALIGN)
    benign = state.ids_with_label(BENIGN)
    if not malign or not benign:
        raise EmptyClassError("slide selection needs at least one malign and one benign slide")

    overdue = state.overdue()
    if overdue:
        choice = overdue[0]
    elif rng.random() < 0.5:
        choice = malign[int(rng.integers(len(malign)))]
    else:
        dist = benign_slide_distribution(state)
        ids = list(dist)
        choice = ids[int(rng.choice(len(ids), p=np.array(list(dist.values()))))]

    state.record_visit(choice)
    return choice
