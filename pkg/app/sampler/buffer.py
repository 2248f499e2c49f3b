import logging
import math
import threading
from typing import Any, List, Optional

from app.core.exceptions import BufferNotReady, DomainError
from app.core.rng import SeedLike, as_generator

logger = logging.getLogger(__name__)


class ShuffleBuffer:
    """
    Bounded pool that decorrelates sampled patches before batching.

    Pushing into a full buffer evicts a uniformly random entry. Popping
    removes ``batch_size`` entries uniformly at random without replacement
    and is allowed once the buffer holds at least
    ``max(batch_size, ceil(min_fill_fraction * capacity))`` entries.
    """

    def __init__(self, capacity: int, min_fill_fraction: float = 0.0):
        if capacity < 1:
            raise DomainError(f"capacity must be positive, got {capacity}")
        if not 0.0 <= min_fill_fraction <= 1.0:
            raise DomainError(f"min_fill_fraction must lie in [0, 1], got {min_fill_fraction}")
        self.capacity = capacity
        self.min_fill_fraction = min_fill_fraction
        self._entries: List[Any] = []
        self._lock = threading.Lock()
        self.pushed = 0
        self.evicted = 0

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    @property
    def fill(self) -> float:
        return len(self) / self.capacity

    def ready_size(self, batch_size: int) -> int:
        return max(batch_size, math.ceil(self.min_fill_fraction * self.capacity))

    def is_ready(self, batch_size: int) -> bool:
        return len(self) >= self.ready_size(batch_size)

    def push(self, entry: Any, rng_seed: SeedLike = None) -> Optional[Any]:
        """Insert an entry; return the evicted entry when the buffer was full."""
        with self._lock:
            self.pushed += 1
            if len(self._entries) < self.capacity:
                self._entries.append(entry)
                return None
            rng = as_generator(rng_seed)
            slot = int(rng.integers(len(self._entries)))
            evicted = self._entries[slot]
            self._entries[slot] = entry
            self.evicted += 1
            return evicted

    def pop_batch(self, batch_size: int, rng_seed: SeedLike = None) -> List[Any]:
        if batch_size < 1:
            raise DomainError(f"batch_size must be positive, got {batch_size}")
        if batch_size > self.capacity:
            raise DomainError(f"batch_size {batch_size} exceeds buffer capacity {self.capacity}")
        with self._lock:
            needed = self.ready_size(batch_size)
            if len(self._entries) < needed:
                raise BufferNotReady(f"buffer holds {len(self._entries)} entries, {needed} required")
            rng = as_generator(rng_seed)
            picks = rng.choice(len(self._entries), size=batch_size, replace=False)
            batch = [self._entries[int(i)] for i in picks]
            for i in sorted((int(i) for i in picks), reverse=True):
                last = self._entries.pop()
                if i < len(self._entries):
                    self._entries[i] = last
            return batch


def buffer_push(buf: ShuffleBuffer, entry: Any, rng_seed: SeedLike = None) -> Optional[Any]:
    return buf.push(entry, rng_seed)


def buffer_pop_batch(buf: ShuffleBuffer, batch_size: int, rng_seed: SeedLike = None) -> List[Any]:
    return buf.pop_batch(batch_size, rng_seed)
