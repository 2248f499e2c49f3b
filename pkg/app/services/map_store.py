import hashlib
import logging
import math
import threading
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from app.core.aggregation import pixel_softmax
from app.core.exceptions import DomainError
from app.models.network import Weights, forward, receptive_field_radius

logger = logging.getLogger(__name__)


def _checksum(arr: np.ndarray) -> str:
    return hashlib.blake2b(np.ascontiguousarray(arr).tobytes(), digest_size=16).hexdigest()


@dataclass(frozen=True)
class MapEntry:
    """One published probability map. The array is read-only."""
    slide_id: str
    prob_map: np.ndarray
    weights_version: int
    map_version: int
    epoch: int
    checksum: str

    def is_intact(self) -> bool:
        return _checksum(self.prob_map) == self.checksum


class MapStore:
    """
    Latest probability map of every slide.

    Publishing builds a complete entry first and swaps it in under the lock,
    so a reader gets either the previous map or the new one. ``read`` checks
    each entry against its checksum and counts mismatches as torn reads.
    """

    def __init__(self, initial_weights_version: int = 0):
        self._entries: Dict[str, MapEntry] = {}
        self._lock = threading.Lock()
        self.latest_weights_version = initial_weights_version
        self.publications = 0
        self.torn_reads = 0

    def publish(self, slide_id: str, prob_map: np.ndarray, weights_version: int, epoch: int = 0) -> MapEntry:
        data = np.array(prob_map, copy=True)
        data.setflags(write=False)
        with self._lock:
            previous = self._entries.get(slide_id)
            entry = MapEntry(
                slide_id=slide_id,
                prob_map=data,
                weights_version=weights_version,
                map_version=1 if previous is None else previous.map_version + 1,
                epoch=epoch,
                checksum=_checksum(data),
            )
            self._entries[slide_id] = entry
            self.latest_weights_version = weights_version
            self.publications += 1
        logger.debug(f"Published map v{entry.map_version} of {slide_id} from weights v{weights_version}")
        return entry

    def read(self, slide_id: str) -> Optional[MapEntry]:
        with self._lock:
            entry = self._entries.get(slide_id)
        if entry is not None and not entry.is_intact():
            with self._lock:
                self.torn_reads += 1
            logger.error(f"Torn read detected on the map of {slide_id}")
        return entry

    def version(self, slide_id: str) -> int:
        with self._lock:
            entry = self._entries.get(slide_id)
        return 0 if entry is None else entry.map_version

    def slide_ids(self) -> List[str]:
        with self._lock:
            return sorted(self._entries)

    def snapshot(self) -> Dict[str, MapEntry]:
        with self._lock:
            return dict(self._entries)

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


class WeightSlot:
    """Single-producer single-consumer slot holding the latest weight snapshot."""

    def __init__(self, weights: Weights):
        self._weights = weights
        self._lock = threading.Lock()
        self.publications = 0

    def publish(self, weights: Weights) -> None:
        with self._lock:
            self._weights = weights
            self.publications += 1

    def latest(self) -> Weights:
        with self._lock:
            return self._weights


def tile_margin(weights: Weights) -> int:
    """Receptive-field radius rounded up to the pooling stride."""
    multiple = weights.config.stride_multiple
    return int(math.ceil(receptive_field_radius(weights.config) / multiple)) * multiple


def tile_windows(shape: Tuple[int, int], chunk_size: int, margin: int) -> Iterable[Tuple[slice, slice, slice, slice]]:
    """Yield (input rows, input cols, output rows, output cols) for every tile.

    Output slices index the tile's own core inside the inference window.
    """
    h, w = shape
    for r0 in range(0, h, chunk_size):
        r1 = min(r0 + chunk_size, h)
        top, bottom = max(r0 - margin, 0), min(r1 + margin, h)
        for c0 in range(0, w, chunk_size):
            c1 = min(c0 + chunk_size, w)
            left, right = max(c0 - margin, 0), min(c1 + margin, w)
            yield (
                slice(top, bottom), slice(left, right),
                slice(r0 - top, r1 - top), slice(c0 - left, c1 - left),
            )


def map_slide(weights: Weights, pixels: np.ndarray, chunk_size: Optional[int] = None) -> np.ndarray:
    """Malign probability map of a whole slide, computed tile by tile.

    Tiles are widened by the receptive-field margin on every inner side, so
    the stitched result equals whole-slide inference exactly. Periodic
    padding couples opposite borders and is always mapped in one piece.
    """
    h, w = pixels.shape[:2]
    multiple = weights.config.stride_multiple
    if chunk_size is None or weights.config.padding == "periodic" or chunk_size >= max(h, w):
        return pixel_softmax(forward(weights, pixels))
    if chunk_size < 1 or chunk_size % multiple:
        raise DomainError(f"chunk size {chunk_size} must be a positive multiple of {multiple}")

    margin = tile_margin(weights)
    out = np.empty((h, w), dtype=weights.dtype)
    for rows, cols, out_rows, out_cols in tile_windows((h, w), chunk_size, margin):
        logits = forward(weights, pixels[rows, cols])
        out[rows.start + out_rows.start:rows.start + out_rows.stop,
            cols.start + out_cols.start:cols.start + out_cols.stop] = pixel_softmax(logits[out_rows, out_cols])
    return out


def run_mapping_pass(
    weights: Weights,
    slides: Iterable,
    chunk_size: Optional[int] = None,
    store: Optional[MapStore] = None,
    epoch: int = 0,
) -> MapStore:
    """Map every slide with one weight snapshot and publish the results."""
    store = store if store is not None else MapStore(weights.version)
    count = 0
    for slide in slides:
        store.publish(slide.slide_id, map_slide(weights, slide.pixels, chunk_size), weights.version, epoch)
        count += 1
    logger.info(f"Mapped {count} slides with weights v{weights.version}")
    return store
