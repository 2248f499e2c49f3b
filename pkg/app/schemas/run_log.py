import csv
import logging
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from pydantic import BaseModel, Field

logger = logging.getLogger(__name__)

STEP_COLUMNS = ["step", "loss", "slide_id", "gamma_estimate", "buffer_fill", "staleness"]


class StepRecord(BaseModel):
    """
    One training step.

    Attributes:
        step: Training step index, starting at 1
        loss: Batch mean of the patch loss
        slide_id: Slide contributing most patches to the batch
        gamma_estimate: Fraction of malign-labeled patches without malign pixels (None when the batch has none)
        buffer_fill: Shuffle buffer occupancy after the pop, in [0, 1]
        staleness: Steps between the current weights and the weights of the newest published map
        map_age: Steps between the current weights and the map the last visited slide was sampled from
    """
    step: int = Field(..., ge=1)
    loss: float
    slide_id: str
    gamma_estimate: Optional[float] = Field(None, ge=0.0, le=1.0)
    buffer_fill: float = Field(..., ge=0.0, le=1.0)
    staleness: int = Field(..., ge=0)
    map_age: Optional[int] = Field(None, ge=0)

    class Config:
        extra = "forbid"
        frozen = True
        json_schema_extra = {
            "example": {
                "step": 50,
                "loss": 0.41,
                "slide_id": "slide_0003",
                "gamma_estimate": 0.25,
                "buffer_fill": 0.62,
                "staleness": 12,
                "map_age": 30
            }
        }


class VisitRecord(BaseModel):
    epoch: int = Field(..., ge=0)
    slide_id: str
    visits: int = Field(..., ge=0)

    class Config:
        extra = "forbid"
        frozen = True


class RunLog(BaseModel):
    """Append-only record of a training run."""
    steps: List[StepRecord] = Field(default_factory=list)
    visits: List[VisitRecord] = Field(default_factory=list)
    max_visit_gap: int = Field(0, ge=0, description="Largest gap in epochs between two maps of one slide")
    staleness_bound: Optional[int] = Field(None, description="Exchange period plus the longest mapping epoch in steps")
    mapping_actions: int = Field(0, ge=0)
    torn_reads: int = Field(0, ge=0)

    class Config:
        extra = "forbid"

    def append(self, record: StepRecord) -> None:
        if self.steps and record.step <= self.steps[-1].step:
            raise ValueError(f"step {record.step} does not follow step {self.steps[-1].step}")
        self.steps.append(record)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.steps])

    @property
    def max_staleness(self) -> int:
        return max((r.staleness for r in self.steps), default=0)

    def staleness_within_bound(self) -> bool:
        return self.staleness_bound is None or self.max_staleness <= self.staleness_bound

    def tail_gamma(self, fraction: float = 0.25) -> Optional[float]:
        """Mean batch γ over the final ``fraction`` of steps."""
        if not self.steps:
            return None
        start = int(len(self.steps) * (1.0 - fraction))
        values = [r.gamma_estimate for r in self.steps[start:] if r.gamma_estimate is not None]
        return float(np.mean(values)) if values else None

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=STEP_COLUMNS)
            writer.writeheader()
            for record in self.steps:
                row = record.model_dump(include=set(STEP_COLUMNS))
                if row["gamma_estimate"] is None:
                    row["gamma_estimate"] = ""
                writer.writerow(row)
        logger.info(f"Wrote {len(self.steps)} step records to {path}")
        return path

    def write_visits_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=["epoch", "slide_id", "visits"])
            writer.writeheader()
            for record in self.visits:
                writer.writerow(record.model_dump())
        return path
