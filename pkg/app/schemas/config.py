import json
import logging
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, Field, ValidationError, model_validator

from app.core.exceptions import ConfigError

logger = logging.getLogger(__name__)


class BetaParams(BaseModel):
    """
    Loss-shaping vector of the β-divergence.

    Attributes:
        beta0: Exponent applied to the benign class term
        beta1: Exponent applied to the malign class term (1 makes the term linear)
    """
    beta0: float = Field(0.0, ge=0.0, lt=1.0, description="Benign class exponent")
    beta1: float = Field(1.0, ge=0.0, le=1.0, description="Malign class exponent")

    class Config:
        extra = "forbid"
        frozen = True
        json_schema_extra = {"example": {"beta0": 0.0, "beta1": 0.61}}

    def as_tuple(self) -> tuple:
        return (self.beta0, self.beta1)


class NoiseSetting(BaseModel):
    """
    Label-noise setting of the one-pixel model.

    Attributes:
        gamma: Probability that a patch from a malign slide holds no malign pixel
        r: Ratio of benign slides
    """
    gamma: float = Field(..., ge=0.0, le=1.0, description="Label-noise rate")
    r: float = Field(..., gt=0.0, lt=1.0, description="Benign slide ratio")

    class Config:
        extra = "forbid"
        frozen = True
        json_schema_extra = {"example": {"gamma": 0.33, "r": 0.5}}


class TrivialModelParams(BaseModel):
    theta0: float = Field(..., gt=0.0, lt=1.0, description="P(malign | benign pixel)")
    theta1: float = Field(..., gt=0.0, lt=1.0, description="P(malign | malign pixel)")

    class Config:
        extra = "forbid"
        frozen = True


class DatasetSpec(BaseModel):
    """
    Parameters of a synthetic slide dataset.

    Attributes:
        slide_count: Number of slides to generate
        benign_fraction: Fraction r of benign slides (assigned by count)
        height, width: Slide size in pixels
        channels: Number of image channels
        lesion_fraction_min, lesion_fraction_max: Range of total lesion area per malign slide
        blob_count_min, blob_count_max: Range of elliptical lesion blobs per malign slide
        correlation_length: Smoothing length of the background texture in pixels
        noise_scale: Amplitude of the background texture
        lesion_contrast: Mean intensity shift δ of lesion pixels on the lesion channel
        lesion_channel: Channel carrying the lesion shift
        seed: Master seed; per-slide seeds are spawned from it
    """
    slide_count: int = Field(20, ge=1, description="Number of slides")
    benign_fraction: float = Field(0.5, ge=0.0, le=1.0, description="Benign slide fraction r")
    height: int = Field(128, ge=8, description="Slide height in pixels")
    width: int = Field(128, ge=8, description="Slide width in pixels")
    channels: int = Field(3, ge=1, description="Image channels")
    lesion_fraction_min: float = Field(0.02, gt=0.0, lt=1.0, description="Minimum lesion area fraction")
    lesion_fraction_max: float = Field(0.02, gt=0.0, lt=1.0, description="Maximum lesion area fraction")
    blob_count_min: int = Field(1, ge=1, description="Minimum lesion blob count")
    blob_count_max: int = Field(3, ge=1, description="Maximum lesion blob count")
    correlation_length: float = Field(4.0, gt=0.0, description="Background texture correlation length")
    noise_scale: float = Field(0.08, ge=0.0, description="Background texture amplitude")
    lesion_contrast: float = Field(0.25, gt=0.0, le=1.0, description="Lesion mean shift δ")
    lesion_channel: int = Field(0, ge=0, description="Channel carrying the lesion shift")
    seed: int = Field(0, ge=0, description="Master seed")

    class Config:
        extra = "forbid"
        json_schema_extra = {
            "example": {
                "slide_count": 20,
                "benign_fraction": 0.5,
                "height": 128,
                "width": 128,
                "channels": 3,
                "lesion_fraction_min": 0.02,
                "lesion_fraction_max": 0.02,
                "blob_count_min": 1,
                "blob_count_max": 3,
                "correlation_length": 4.0,
                "noise_scale": 0.08,
                "lesion_contrast": 0.25,
                "lesion_channel": 0,
                "seed": 7
            }
        }

    @model_validator(mode="after")
    def check_ranges(self):
        if self.lesion_fraction_min > self.lesion_fraction_max:
            raise ValueError("lesion_fraction_min must not exceed lesion_fraction_max")
        if self.blob_count_min > self.blob_count_max:
            raise ValueError("blob_count_min must not exceed blob_count_max")
        if self.lesion_channel >= self.channels:
            raise ValueError("lesion_channel must index an existing channel")
        return self


class NetworkConfig(BaseModel):
    channels: int = Field(3, ge=1, description="Input channels c")
    base_filters: int = Field(8, ge=1, description="Filters of the first level")
    depth: int = Field(2, ge=0, description="Number of downsampling stages")
    kernel_size: int = Field(3, ge=1, description="Convolution kernel size (odd)")
    padding: Literal["zero", "periodic"] = Field("zero", description="Border handling of convolutions")
    dtype: Literal["float32", "float64"] = Field("float32", description="Float precision of weights and activations")
    input_mean: float = Field(0.5, description="Subtracted from every input pixel")
    input_std: float = Field(0.1, gt=0.0, description="Divides the centred input; matches the default slide texture")
    negative_slope: float = Field(0.1, ge=0.0, lt=1.0, description="Leaky activation slope for negative inputs (0 = ReLU)")
    seed: int = Field(0, ge=0, description="Initialization seed")

    class Config:
        extra = "forbid"
        json_schema_extra = {
            "example": {"channels": 3, "base_filters": 8, "depth": 2, "kernel_size": 3,
                        "padding": "zero", "dtype": "float32", "input_mean": 0.5, "input_std": 0.1,
                        "negative_slope": 0.1, "seed": 0}
        }

    @model_validator(mode="after")
    def check_kernel(self):
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        return self

    @property
    def stride_multiple(self) -> int:
        """Spatial sizes must be divisible by this value."""
        return 2 ** self.depth


class TrainStep(BaseModel):
    learning_rate: float = Field(0.01, gt=0.0, description="SGD learning rate")
    batch_size: int = Field(8, ge=1, description="Patches per batch")
    momentum: float = Field(0.9, ge=0.0, lt=1.0, description="Momentum coefficient (0 = plain SGD)")
    clip_norm: float = Field(5.0, gt=0.0, description="Global gradient-norm clip")

    class Config:
        extra = "forbid"


class PipelineConfig(BaseModel):
    """
    Training pipeline parameters.

    Loss and sampling defaults: β₀ = 0, β₁ = 1, η = 50 % and α = 2.
    """
    alpha: float = Field(2.0, ge=0.0, description="Sampling exponent α")
    eta: float = Field(50.0, gt=0.0, le=100.0, description="Top-η percentage for the malign slide logit")
    beta: BetaParams = Field(default_factory=BetaParams, description="Loss-shaping vector")
    patch_size: int = Field(32, ge=1, description="Training patch side length")
    batch_size: int = Field(8, ge=1, description="Patches per training batch")
    buffer_capacity: int = Field(256, ge=1, description="Shuffle buffer capacity")
    min_fill_fraction: float = Field(0.25, gt=0.0, le=1.0, description="Fill fraction required before popping")
    staleness_epochs: int = Field(4, ge=1, description="Every slide is mapped at least once every N epochs")
    map_chunk_size: int = Field(64, ge=1, description="Tile size used by the mapping process")
    total_steps: int = Field(500, ge=0, description="Training steps")
    exchange_period: int = Field(50, ge=1, description="Steps between weight snapshot publications")
    patches_per_visit: int = Field(16, ge=1, description="Patches sampled per training slide visit")
    train_steps_per_map: int = Field(4, ge=0, description="Training steps per mapping action in interleaved mode")
    learning_rate: float = Field(0.01, gt=0.0, description="SGD learning rate")
    momentum: float = Field(0.9, ge=0.0, lt=1.0, description="SGD momentum")
    clip_norm: float = Field(5.0, gt=0.0, description="Global gradient-norm clip")
    augment: bool = Field(True, description="Apply random dihedral augmentation to patches")
    deterministic: bool = Field(False, description="Run the single-threaded interleaved schedule")
    log_every: int = Field(50, ge=1, description="Steps between progress log lines")
    seed: int = Field(0, ge=0, description="Master seed of sampling and shuffling")

    class Config:
        extra = "forbid"
        json_schema_extra = {
            "example": {
                "alpha": 2.0,
                "eta": 50.0,
                "beta": {"beta0": 0.0, "beta1": 1.0},
                "patch_size": 32,
                "batch_size": 8,
                "buffer_capacity": 256,
                "min_fill_fraction": 0.25,
                "staleness_epochs": 4,
                "map_chunk_size": 64,
                "total_steps": 500,
                "exchange_period": 50,
                "seed": 0
            }
        }

    @property
    def train_step(self) -> TrainStep:
        return TrainStep(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            momentum=self.momentum,
            clip_norm=self.clip_norm,
        )


class ExperimentConfig(BaseModel):
    dataset: DatasetSpec = Field(default_factory=DatasetSpec, description="Synthetic dataset parameters")
    network: NetworkConfig = Field(default_factory=NetworkConfig, description="Segmentation network")
    pipeline: PipelineConfig = Field(default_factory=PipelineConfig, description="Training pipeline")
    data_dir: str = Field("data", description="Dataset directory")
    output_dir: str = Field("runs", description="Directory receiving run artifacts")
    maps_dir: Optional[str] = Field(None, description="Directory holding probability maps (defaults to <output_dir>/maps)")
    detection_threshold: float = Field(0.5, gt=0.0, lt=1.0, description="Probability threshold for detections and overlap")

    class Config:
        extra = "forbid"

    @model_validator(mode="after")
    def check_compatibility(self):
        multiple = self.network.stride_multiple
        if self.network.channels != self.dataset.channels:
            raise ValueError("network.channels must equal dataset.channels")
        for name, value in (
            ("pipeline.patch_size", self.pipeline.patch_size),
            ("pipeline.map_chunk_size", self.pipeline.map_chunk_size),
            ("dataset.height", self.dataset.height),
            ("dataset.width", self.dataset.width),
        ):
            if value % multiple:
                raise ValueError(f"{name}={value} is not divisible by 2**depth={multiple}")
        if self.pipeline.patch_size > min(self.dataset.height, self.dataset.width):
            raise ValueError("pipeline.patch_size exceeds the slide size")
        return self

    @property
    def resolved_maps_dir(self) -> str:
        return self.maps_dir or str(Path(self.output_dir) / "maps")


def describe_validation_error(error: ValidationError) -> str:
    """Turn a pydantic error into a single line naming the offending key."""
    parts = []
    for item in error.errors():
        key = ".".join(str(p) for p in item.get("loc", ())) or "<root>"
        if item.get("type") == "extra_forbidden":
            parts.append(f"unknown key '{key}'")
        else:
            parts.append(f"{key}: {item.get('msg')}")
    return "; ".join(parts)


def parse_config(data: Union[dict, str], model=ExperimentConfig):
    """Validate a dict (or JSON text) against a config model, raising ConfigError."""
    try:
        if isinstance(data, str):
            data = json.loads(data)
        return model.model_validate(data)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e}")
    except ValidationError as e:
        raise ConfigError(describe_validation_error(e))


def load_config(path: Union[str, Path], model=ExperimentConfig):
    """Load and validate a JSON config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}", code="missing_file")
    logger.info(f"Loading config from {path}")
    return parse_config(path.read_text(encoding="utf-8"), model)


def write_resolved_config(config: BaseModel, directory: Union[str, Path]) -> Path:
    """Write the fully resolved config (defaults included) next to a command's outputs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    target = directory / "resolved_config.json"
    target.write_text(json.dumps(config.model_dump(), indent=2, sort_keys=True), encoding="utf-8")
    return target
