"""Single-file weight checkpoints.

Layout: magic ``NWT1`` | uint32 LE header length | JSON header (network
config, version, stored dtype, tensor names and shapes) | little-endian
tensors in declaration order. Float32 networks are stored as float32 and
float64 networks as float64, so every round trip is bit-exact.
"""
import json
import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from app.core.exceptions import CheckpointError
from app.models.network import Weights, layer_specs
from app.schemas.config import NetworkConfig

logger = logging.getLogger(__name__)

MAGIC = b"NWT1"
_LEN = struct.Struct("<I")
_STORED = {"float32": "<f4", "float64": "<f8"}


def save(weights: Weights, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "config": weights.config.model_dump(),
        "version": weights.version,
        "dtype": weights.config.dtype,
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in weights.tensors.items()],
    }
    stored = _STORED[weights.config.dtype]
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_LEN.pack(len(header_bytes)))
        f.write(header_bytes)
        for arr in weights.tensors.values():
            f.write(np.ascontiguousarray(arr, dtype=stored).tobytes())
    logger.info(f"Saved checkpoint version {weights.version} to {path}")
    return path


def load(path: Union[str, Path]) -> Weights:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}", code="missing_file")
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a weight checkpoint (bad magic {data[:4]!r})")
    try:
        (header_len,) = _LEN.unpack_from(data, 4)
        header = json.loads(data[8:8 + header_len].decode("utf-8"))
        config = NetworkConfig.model_validate(header["config"])
    except Exception as e:
        raise CheckpointError(f"corrupt checkpoint header in {path}: {e}")

    expected = [f"{name}.{kind}" for name, *_ in layer_specs(config) for kind in ("w", "b")]
    names = [t["name"] for t in header["tensors"]]
    if names != expected:
        raise CheckpointError(f"tensor list in {path} does not match the network config")

    stored_name = header.get("dtype", "float32")
    if stored_name not in _STORED:
        raise CheckpointError(f"{path} stores unsupported tensor type {stored_name!r}")
    stored = np.dtype(_STORED[stored_name])

    offset = 8 + header_len
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        end = offset + stored.itemsize * count
        if end > len(data):
            raise CheckpointError(f"{path} is truncated at tensor {entry['name']}")
        arr = np.frombuffer(data, dtype=stored, count=count, offset=offset).reshape(shape)
        tensors[entry["name"]] = arr.astype(config.dtype)
        offset = end
    return Weights(config=config, tensors=tensors, version=int(header["version"]))
