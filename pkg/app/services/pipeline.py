"""Mapping and training workers sharing a map store, a weight slot and a shuffle buffer.

The mapping worker repeatedly picks a slide with the error-driven schedule,
maps it with the newest weight snapshot and publishes the result. The
training worker samples patches from the latest maps into the shuffle
buffer, pops batches and updates the weights, publishing a snapshot every
``exchange_period`` steps. ``deterministic`` runs both on one thread in a
fixed alternation.
"""
import logging
import threading
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.core.exceptions import BufferNotReady, ConfigError, EmptyClassError, PipelineError
from app.core.objective import patch_loss_and_grad
from app.core.rng import spawn
from app.data.synthwsi import Patch, SyntheticSlide, augment, batch_gamma, extract_patch
from app.models.network import Weights, backward, forward_with_cache, init
from app.models.optim import SGDOptimizer
from app.sampler import (
    BENIGN,
    MALIGN,
    ShuffleBuffer,
    SlideSelectionState,
    next_slide,
    patch_distribution,
    sample_patch_centers,
)
from app.sampler.slides import DEFAULT_MAP_VALUE
from app.schemas.config import NetworkConfig, PipelineConfig
from app.schemas.run_log import RunLog, StepRecord, VisitRecord
from app.services.map_store import MapStore, WeightSlot, map_slide

logger = logging.getLogger(__name__)


@dataclass
class TrainingResult:
    weights: Weights
    run_log: RunLog
    store: MapStore


def check_feasibility(slides: Sequence[SyntheticSlide], network: NetworkConfig, config: PipelineConfig) -> None:
    labels = {s.label for s in slides}
    if labels != {BENIGN, MALIGN}:
        raise EmptyClassError("training needs at least one benign and one malign slide")
    multiple = network.stride_multiple
    h = min(s.shape[0] for s in slides)
    w = min(s.shape[1] for s in slides)
    if config.patch_size % multiple or config.map_chunk_size % multiple:
        raise ConfigError(f"patch_size and map_chunk_size must be multiples of {multiple}", code="infeasible_spec")
    if config.patch_size > min(h, w):
        raise ConfigError(f"patch_size {config.patch_size} exceeds the smallest slide ({h}x{w})", code="infeasible_spec")
    if any(s.shape[0] % multiple or s.shape[1] % multiple for s in slides):
        raise ConfigError(f"slide sizes must be multiples of {multiple}", code="infeasible_spec")
    if any(s.pixels.shape[2] != network.channels for s in slides):
        raise ConfigError(f"slides must have {network.channels} channels", code="infeasible_spec")
    if config.batch_size > config.buffer_capacity:
        raise ConfigError("batch_size exceeds buffer_capacity", code="infeasible_spec")


class TrainingPipeline:
    """
    State shared by the mapping and training workers.

    Training draws from its own random stream and fills the buffer itself,
    so its trajectory depends on mapping only through the maps it samples
    from. With ``alpha = 0`` every map yields the same uniform distribution
    and both execution modes produce the same weights.
    """

    def __init__(
        self,
        slides: Sequence[SyntheticSlide],
        network_config: NetworkConfig,
        config: PipelineConfig,
        weights: Optional[Weights] = None,
        slide_schedule: Optional[Sequence[str]] = None,
    ):
        check_feasibility(slides, network_config, config)
        self.config = config
        self.slides: Dict[str, SyntheticSlide] = {s.slide_id: s for s in slides}
        self.selection = SlideSelectionState(
            [s.slide_id for s in slides],
            [s.label for s in slides],
            [s.shape for s in slides],
            staleness_epochs=config.staleness_epochs,
        )
        self.weights = weights if weights is not None else init(network_config)
        self.initial_version = self.weights.version
        self.store = MapStore(self.weights.version)
        self.slot = WeightSlot(self.weights)
        self.buffer = ShuffleBuffer(config.buffer_capacity, config.min_fill_fraction)
        self.optimizer = SGDOptimizer(config.train_step)
        self.run_log = RunLog()
        self.steps_done = 0

        unknown = set(slide_schedule or ()) - set(self.slides)
        if unknown:
            raise ConfigError(f"slide schedule names unknown slides: {sorted(unknown)}")
        self._schedule: List[str] = list(slide_schedule or ())
        self._schedule_pos = 0
        self._by_label = {label: self.selection.ids_with_label(label) for label in (BENIGN, MALIGN)}
        self._train_rng = spawn(config.seed, 2)
        self._map_rng = spawn(config.seed, 3)
        self._last_map_age: Optional[int] = None
        self._action_starts: List[int] = []

    # -- training worker -----------------------------------------------------

    def _choose_training_slide(self) -> str:
        if self._schedule:
            slide_id = self._schedule[self._schedule_pos % len(self._schedule)]
            self._schedule_pos += 1
            return slide_id
        label = MALIGN if self._train_rng.random() < 0.5 else BENIGN
        ids = self._by_label[label]
        return ids[int(self._train_rng.integers(len(ids)))]

    def visit_slide(self) -> List[Patch]:
        """Sample patches from one slide's latest map and push them into the buffer."""
        cfg = self.config
        slide = self.slides[self._choose_training_slide()]
        entry = self.store.read(slide.slide_id)
        if entry is None:
            prob_map = np.full(slide.shape, DEFAULT_MAP_VALUE)
            self._last_map_age = None
        else:
            prob_map = entry.prob_map
            self._last_map_age = self.weights.version - entry.weights_version

        dist = patch_distribution(prob_map, cfg.alpha, slide.slide_id)
        patches = []
        for center in sample_patch_centers(dist, cfg.patches_per_visit, self._train_rng):
            patch = extract_patch(slide, center, cfg.patch_size)
            if cfg.augment:
                patch = augment(patch, self._train_rng)
            self.buffer.push(patch, self._train_rng)
            patches.append(patch)
        return patches

    def next_batch(self) -> List[Patch]:
        while True:
            try:
                return self.buffer.pop_batch(self.config.batch_size, self._train_rng)
            except BufferNotReady as e:
                logger.debug(f"{e.detail}; visiting another slide")
                self.visit_slide()

    def train_step(self) -> StepRecord:
        cfg = self.config
        batch = self.next_batch()
        pixels = np.stack([p.pixels for p in batch])
        labels = [p.label for p in batch]

        logits, cache = forward_with_cache(self.weights, pixels)
        result = patch_loss_and_grad(logits, labels, cfg.beta, cfg.eta)
        if not np.isfinite(result.loss):
            raise FloatingPointError(f"non-finite loss at step {self.steps_done + 1}")
        grads = backward(self.weights, pixels, result.grad_logits, cache)
        self.weights = self.optimizer.step(self.weights, grads)
        self.steps_done += 1
        if self.steps_done % cfg.exchange_period == 0:
            self.slot.publish(self.weights)

        record = StepRecord(
            step=self.steps_done,
            loss=result.loss,
            slide_id=Counter(p.slide_id for p in batch).most_common(1)[0][0],
            gamma_estimate=batch_gamma(batch),
            buffer_fill=self.buffer.fill,
            staleness=max(0, self.weights.version - self.store.latest_weights_version),
            map_age=self._last_map_age,
        )
        self.run_log.append(record)
        if self.steps_done % cfg.log_every == 0:
            logger.info(
                f"Step {self.steps_done}/{cfg.total_steps}: loss={record.loss:.4f} "
                f"buffer={record.buffer_fill:.2f} staleness={record.staleness}"
            )
        return record

    # -- mapping worker ------------------------------------------------------

    def map_one(self) -> str:
        """One mapping action: pick a slide, map it with the newest snapshot, publish."""
        self._action_starts.append(self.steps_done)
        slide_id = next_slide(self.selection, self._map_rng)
        weights = self.slot.latest()
        prob_map = map_slide(weights, self.slides[slide_id].pixels, self.config.map_chunk_size)
        epoch = self.selection.visit_epochs[slide_id][-1]
        self.store.publish(slide_id, prob_map, weights.version, epoch)
        self.selection.update_map(slide_id, prob_map)
        return slide_id

    # -- schedules -----------------------------------------------------------

    def step_interleaved(self) -> "TrainingPipeline":
        """One mapping action followed by up to ``train_steps_per_map`` training steps."""
        self.map_one()
        remaining = self.config.total_steps - self.steps_done
        for _ in range(min(self.config.train_steps_per_map, max(remaining, 0))):
            self.train_step()
        return self

    def run_interleaved(self) -> TrainingResult:
        if self.config.train_steps_per_map == 0:
            logger.warning("train_steps_per_map is 0; running one mapping epoch without training")
            for _ in range(len(self.slides)):
                self.step_interleaved()
        else:
            while self.steps_done < self.config.total_steps:
                self.step_interleaved()
        return self.finalize()

    def run_concurrent(self) -> TrainingResult:
        stop = threading.Event()
        failures = []

        def mapping():
            while not stop.is_set():
                self.map_one()

        def training():
            while self.steps_done < self.config.total_steps and not stop.is_set():
                self.train_step()

        def guarded(name, fn):
            def run():
                try:
                    fn()
                except Exception as e:
                    logger.error(f"{name} worker failed: {str(e)}")
                    failures.append((name, e))
                finally:
                    stop.set()
            return run

        workers = [
            threading.Thread(target=guarded("mapping", mapping), name="mapping-worker", daemon=True),
            threading.Thread(target=guarded("training", training), name="training-worker", daemon=True),
        ]
        for worker in workers:
            worker.start()
        for worker in workers:
            worker.join()
        if failures:
            name, error = failures[0]
            raise PipelineError(f"{name} worker failed: {error}") from error
        return self.finalize()

    def run(self) -> TrainingResult:
        mode = "interleaved" if self.config.deterministic else "concurrent"
        logger.info(f"Training {self.config.total_steps} steps on {len(self.slides)} slides ({mode} mode)")
        return self.run_interleaved() if self.config.deterministic else self.run_concurrent()

    def staleness_bound(self) -> Optional[int]:
        """Exchange period plus the longest span of two consecutive mapping actions, in steps."""
        if not self._action_starts:
            return None
        # the run start opens the first interval
        intervals = np.diff([0] + self._action_starts + [self.steps_done])
        spans = intervals[:-1] + intervals[1:] if intervals.size > 1 else intervals
        return int(self.config.exchange_period + spans.max())

    def finalize(self) -> TrainingResult:
        log = self.run_log
        log.visits = [VisitRecord(**row) for row in self.selection.stats_rows()]
        log.max_visit_gap = self.selection.max_visit_gap()
        log.staleness_bound = self.staleness_bound()
        log.mapping_actions = len(self._action_starts)
        log.torn_reads = self.store.torn_reads
        if not log.staleness_within_bound():
            logger.warning(f"Map staleness {log.max_staleness} exceeded the bound {log.staleness_bound}")
        if log.max_visit_gap > self.config.staleness_epochs:
            logger.warning(f"A slide went {log.max_visit_gap} epochs without a new map")
        logger.info(
            f"Training finished after {self.steps_done} steps and {log.mapping_actions} mapping actions"
        )
        return TrainingResult(weights=self.weights, run_log=log, store=self.store)


def run_training(
    dataset: Sequence[SyntheticSlide],
    network_config: NetworkConfig,
    pipeline_config: PipelineConfig,
    slide_schedule: Optional[Sequence[str]] = None,
    weights: Optional[Weights] = None,
) -> TrainingResult:
    pipeline = TrainingPipeline(dataset, network_config, pipeline_config, weights, slide_schedule)
    return pipeline.run()
