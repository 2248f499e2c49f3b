"""On-disk layout of datasets and probability maps.

Dataset directory::

    index.json          spec, per-slide label, seed index and shape
    <id>.f32            pixels, little-endian float32, (h, w, c) row-major
    <id>_mask.pgm       truth mask, binary PGM (P5) written by Pillow, 255 = lesion

Map directory::

    maps.json           per-slide shape, weights version and map version
    <id>_prob.pgm       round(255 · Q)
    <id>_prob.f32       Q as little-endian float32
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from app.core.exceptions import CheckpointError, ConfigError, ShapeError
from app.data.synthwsi import SyntheticSlide
from app.schemas.config import DatasetSpec

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

INDEX_FILE = "index.json"
MAPS_FILE = "maps.json"


def write_pgm(path: PathLike, image: np.ndarray) -> Path:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ShapeError(f"PGM images are 2-D, got shape {image.shape}")
    path = Path(path)
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path, format="PPM")
    return path


def read_pgm(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"image not found: {path}", code="missing_file")
    try:
        with Image.open(path) as img:
            if img.format != "PPM" or img.mode != "L":
                raise CheckpointError(f"{path} is not an 8-bit grayscale PGM file")
            img.load()
            return np.array(img, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as e:
        raise CheckpointError(f"{path} is not a readable PGM file: {str(e)}")


def write_raw(path: PathLike, array: np.ndarray) -> Path:
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return path


def read_raw(path: PathLike, shape: Tuple[int, ...]) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"raw tensor not found: {path}", code="missing_file")
    data = path.read_bytes()
    expected = 4 * int(np.prod(shape))
    if len(data) != expected:
        raise CheckpointError(f"{path} holds {len(data)} bytes, expected {expected} for shape {tuple(shape)}")
    return np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)


def save_dataset(slides: List[SyntheticSlide], spec: DatasetSpec, directory: PathLike) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for slide in slides:
        write_raw(directory / f"{slide.slide_id}.f32", slide.pixels)
        write_pgm(directory / f"{slide.slide_id}_mask.pgm", slide.truth_mask * 255)
        entries.append({
            "slide_id": slide.slide_id,
            "label": slide.label,
            "seed_index": slide.seed_index,
            "shape": list(slide.pixels.shape),
        })
    index = {"spec": spec.model_dump(), "slides": entries}
    (directory / INDEX_FILE).write_text(json.dumps(index, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(f"Saved {len(slides)} slides to {directory}")
    return directory


def load_dataset(directory: PathLike) -> Tuple[DatasetSpec, List[SyntheticSlide]]:
    directory = Path(directory)
    index_path = directory / INDEX_FILE
    if not index_path.exists():
        raise ConfigError(f"dataset index not found: {index_path}", code="missing_file")
    index = json.loads(index_path.read_text(encoding="utf-8"))
    spec = DatasetSpec.model_validate(index["spec"])
    slides = []
    for entry in index["slides"]:
        slide_id = entry["slide_id"]
        shape = tuple(entry["shape"])
        pixels = read_raw(directory / f"{slide_id}.f32", shape)
        mask = (read_pgm(directory / f"{slide_id}_mask.pgm") > 127).astype(np.uint8)
        if mask.shape != shape[:2]:
            raise CheckpointError(f"mask of {slide_id} has shape {mask.shape}, expected {shape[:2]}")
        pixels.setflags(write=False)
        mask.setflags(write=False)
        slides.append(SyntheticSlide(slide_id, pixels, mask, int(entry["label"]), int(entry["seed_index"])))
    logger.info(f"Loaded {len(slides)} slides from {directory}")
    return spec, slides


def save_prob_map(
    directory: PathLike,
    slide_id: str,
    prob_map: np.ndarray,
    weights_version: Optional[int] = None,
    map_version: Optional[int] = None,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    q = np.asarray(prob_map, dtype=np.float64)
    write_pgm(directory / f"{slide_id}_prob.pgm", np.rint(255.0 * np.clip(q, 0.0, 1.0)).astype(np.uint8))
    write_raw(directory / f"{slide_id}_prob.f32", q)

    manifest_path = directory / MAPS_FILE
    manifest = json.loads(manifest_path.read_text(encoding="utf-8")) if manifest_path.exists() else {}
    manifest[slide_id] = {
        "shape": list(q.shape),
        "weights_version": weights_version,
        "map_version": map_version,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return directory / f"{slide_id}_prob.f32"


def load_prob_map(directory: PathLike, slide_id: str) -> np.ndarray:
    directory = Path(directory)
    manifest_path = directory / MAPS_FILE
    if not manifest_path.exists():
        raise ConfigError(f"map manifest not found: {manifest_path}", code="missing_file")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if slide_id not in manifest:
        raise ConfigError(f"no probability map for {slide_id} in {directory}", code="missing_file")
    return read_raw(directory / f"{slide_id}_prob.f32", tuple(manifest[slide_id]["shape"]))


def load_prob_maps(directory: PathLike) -> Dict[str, np.ndarray]:
    manifest_path = Path(directory) / MAPS_FILE
    if not manifest_path.exists():
        raise ConfigError(f"map manifest not found: {manifest_path}", code="missing_file")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    return {slide_id: load_prob_map(directory, slide_id) for slide_id in sorted(manifest)}
