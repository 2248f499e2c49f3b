"""Miniature fully convolutional encoder–decoder with exact reverse mode.

Layout is NHWC. Each level of the encoder halves the resolution by 2×2
average pooling followed by a 3×3 convolution and a leaky ReLU; the decoder
upsamples by nearest neighbour, convolves, applies the activation and adds
the encoder feature map of the same level. A 1×1 head produces two logits
per pixel. Inputs are centred and scaled by fixed constants of the config
before the first convolution.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from app.core.exceptions import ShapeError
from app.schemas.config import NetworkConfig

logger = logging.getLogger(__name__)

HEAD_GAIN = 0.05


@dataclass(frozen=True)
class Weights:
    """Immutable parameter snapshot. Tensors are stored in declaration order."""
    config: NetworkConfig
    tensors: Dict[str, np.ndarray]
    version: int = 0

    def __post_init__(self):
        for arr in self.tensors.values():
            arr.setflags(write=False)

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.config.dtype)

    def names(self) -> List[str]:
        return list(self.tensors)

    def with_tensors(self, tensors: Dict[str, np.ndarray], version: Optional[int] = None) -> "Weights":
        return Weights(config=self.config, tensors=tensors, version=self.version if version is None else version)

    def astype(self, dtype: str) -> "Weights":
        config = self.config.model_copy(update={"dtype": dtype})
        return Weights(
            config=config,
            tensors={k: v.astype(dtype) for k, v in self.tensors.items()},
            version=self.version,
        )


def layer_specs(config: NetworkConfig) -> List[tuple]:
    """(name, kernel, in_channels, out_channels) of every convolution, in declaration order."""
    f, k = config.base_filters, config.kernel_size
    specs = [("enc0", k, config.channels, f)]
    for level in range(1, config.depth + 1):
        specs.append((f"enc{level}", k, f * 2 ** (level - 1), f * 2 ** level))
    for level in range(config.depth, 0, -1):
        specs.append((f"dec{level}", k, f * 2 ** level, f * 2 ** (level - 1)))
    specs.append(("head", 1, f, 2))
    return specs


def init(config: NetworkConfig) -> Weights:
    """Seeded fan-in scaled uniform initialization; biases start at zero."""
    rng = np.random.default_rng(config.seed)
    gain = 2.0 / (1.0 + config.negative_slope ** 2)
    tensors = {}
    for name, k, cin, cout in layer_specs(config):
        fan_in = k * k * cin
        limit = np.sqrt(3.0 * gain / fan_in) if name != "head" else HEAD_GAIN * np.sqrt(3.0 / fan_in)
        tensors[f"{name}.w"] = rng.uniform(-limit, limit, size=(k, k, cin, cout)).astype(config.dtype)
        tensors[f"{name}.b"] = np.zeros(cout, dtype=config.dtype)
    logger.debug(f"Initialized network with {sum(t.size for t in tensors.values())} parameters")
    return Weights(config=config, tensors=tensors, version=0)


def receptive_field_radius(config: NetworkConfig) -> int:
    """Conservative radius (in input pixels) of the region influencing one output pixel."""
    half = config.kernel_size // 2
    radius, scale = half, 1
    for _ in range(config.depth):
        radius += scale
        scale *= 2
        radius += half * scale
    for _ in range(config.depth):
        scale //= 2
        radius += scale + half * scale
    return radius


# -- primitive layers ---------------------------------------------------------

def _pad(x: np.ndarray, p: int, padding: str) -> np.ndarray:
    if p == 0:
        return x
    mode = "constant" if padding == "zero" else "wrap"
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), mode=mode)


def _unpad(dxp: np.ndarray, p: int, padding: str, h: int, w: int) -> np.ndarray:
    if p == 0:
        return dxp
    if padding == "zero":
        return dxp[:, p:p + h, p:p + w, :]
    rows = (np.arange(h + 2 * p) - p) % h
    cols = (np.arange(w + 2 * p) - p) % w
    dx = np.zeros((dxp.shape[0], h, w, dxp.shape[3]), dtype=dxp.dtype)
    np.add.at(dx, (slice(None), rows[:, None], cols[None, :]), dxp)
    return dx


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, padding: str) -> np.ndarray:
    # One matmul per kernel offset keeps the per-pixel summation order
    # independent of the spatial size, so tiled inference is bit-exact.
    k, _, cin, cout = w.shape
    p = k // 2
    batch, h, wd, _ = x.shape
    xp = _pad(x, p, padding)
    out = np.zeros((batch * h * wd, cout), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols = np.ascontiguousarray(xp[:, i:i + h, j:j + wd, :]).reshape(-1, cin)
            out += cols @ w[i, j]
    out += b
    return out.reshape(batch, h, wd, cout)


def conv2d_backward(x: np.ndarray, w: np.ndarray, grad: np.ndarray, padding: str, need_input_grad: bool = True):
    k, _, cin, cout = w.shape
    p = k // 2
    batch, h, wd, _ = x.shape
    xp = _pad(x, p, padding)
    g2 = np.ascontiguousarray(grad).reshape(-1, cout)
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp) if need_input_grad else None
    for i in range(k):
        for j in range(k):
            cols = np.ascontiguousarray(xp[:, i:i + h, j:j + wd, :]).reshape(-1, cin)
            dw[i, j] = cols.T @ g2
            if need_input_grad:
                dxp[:, i:i + h, j:j + wd, :] += (g2 @ w[i, j].T).reshape(batch, h, wd, cin)
    db = g2.sum(axis=0)
    dx = _unpad(dxp, p, padding, h, wd) if need_input_grad else None
    return dx, dw, db


def avg_pool(x: np.ndarray) -> np.ndarray:
    return (x[:, 0::2, 0::2] + x[:, 1::2, 0::2] + x[:, 0::2, 1::2] + x[:, 1::2, 1::2]) * 0.25


def avg_pool_backward(grad: np.ndarray) -> np.ndarray:
    return upsample(grad) * 0.25


def upsample(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample_backward(grad: np.ndarray) -> np.ndarray:
    return grad[:, 0::2, 0::2] + grad[:, 1::2, 0::2] + grad[:, 0::2, 1::2] + grad[:, 1::2, 1::2]


def activate(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0, z, z * slope)


def activate_backward(grad: np.ndarray, z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0, grad, grad * slope)


# -- network ------------------------------------------------------------------

@dataclass
class ForwardCache:
    x: np.ndarray
    enc_inputs: List[np.ndarray] = field(default_factory=list)
    enc_pre: List[np.ndarray] = field(default_factory=list)
    skips: List[np.ndarray] = field(default_factory=list)
    dec_inputs: Dict[int, np.ndarray] = field(default_factory=dict)
    dec_pre: Dict[int, np.ndarray] = field(default_factory=dict)
    head_input: Optional[np.ndarray] = None


def _prepare_input(weights: Weights, x: np.ndarray) -> np.ndarray:
    config = weights.config
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[3] != config.channels:
        raise ShapeError(f"expected input (B, h, w, {config.channels}), got {x.shape}")
    multiple = config.stride_multiple
    if x.shape[1] % multiple or x.shape[2] % multiple:
        raise ShapeError(f"spatial size {x.shape[1:3]} is not divisible by {multiple}")
    x = x.astype(weights.dtype, copy=False)
    return (x - config.input_mean) / config.input_std


def forward_with_cache(weights: Weights, x: np.ndarray):
    """Logits (B, h, w, 2) and the activations needed by ``backward``."""
    config = weights.config
    t = weights.tensors
    pad = config.padding
    slope = config.negative_slope
    x = _prepare_input(weights, x)
    cache = ForwardCache(x=x)

    a_in = x
    for level in range(config.depth + 1):
        if level > 0:
            a_in = avg_pool(cache.skips[-1])
        z = conv2d(a_in, t[f"enc{level}.w"], t[f"enc{level}.b"], pad)
        cache.enc_inputs.append(a_in)
        cache.enc_pre.append(z)
        cache.skips.append(activate(z, slope))

    a = cache.skips[-1]
    for level in range(config.depth, 0, -1):
        up = upsample(a)
        z = conv2d(up, t[f"dec{level}.w"], t[f"dec{level}.b"], pad)
        cache.dec_inputs[level] = up
        cache.dec_pre[level] = z
        a = activate(z, slope) + cache.skips[level - 1]

    cache.head_input = a
    logits = conv2d(a, t["head.w"], t["head.b"], pad)
    return logits, cache


def forward(weights: Weights, x: np.ndarray) -> np.ndarray:
    """Per-pixel logits. A single (h, w, c) image yields (h, w, 2)."""
    single = np.asarray(x).ndim == 3
    logits, _ = forward_with_cache(weights, x)
    return logits[0] if single else logits


def backward(
    weights: Weights,
    x: np.ndarray,
    upstream: np.ndarray,
    cache: Optional[ForwardCache] = None,
) -> Dict[str, np.ndarray]:
    """Parameter gradients given d(loss)/d(logits)."""
    config = weights.config
    t = weights.tensors
    pad = config.padding
    slope = config.negative_slope
    if cache is None:
        _, cache = forward_with_cache(weights, x)
    upstream = np.asarray(upstream)
    if upstream.ndim == 3:
        upstream = upstream[None]
    upstream = upstream.astype(weights.dtype, copy=False)
    expected = cache.x.shape[:3] + (2,)
    if upstream.shape != expected:
        raise ShapeError(f"upstream gradient shape {upstream.shape} does not match {expected}")

    grads: Dict[str, np.ndarray] = {}
    g, grads["head.w"], grads["head.b"] = conv2d_backward(cache.head_input, t["head.w"], upstream, pad)

    skip_grads = [np.zeros_like(s) for s in cache.skips]
    for level in range(1, config.depth + 1):
        skip_grads[level - 1] += g
        gz = activate_backward(g, cache.dec_pre[level], slope)
        gup, grads[f"dec{level}.w"], grads[f"dec{level}.b"] = conv2d_backward(
            cache.dec_inputs[level], t[f"dec{level}.w"], gz, pad
        )
        g = upsample_backward(gup)
    skip_grads[config.depth] += g

    for level in range(config.depth, -1, -1):
        gz = activate_backward(skip_grads[level], cache.enc_pre[level], slope)
        g_in, grads[f"enc{level}.w"], grads[f"enc{level}.b"] = conv2d_backward(
            cache.enc_inputs[level], t[f"enc{level}.w"], gz, pad, need_input_grad=level > 0
        )
        if level > 0:
            skip_grads[level - 1] += avg_pool_backward(g_in)

    return {name: grads[name] for name in t}
