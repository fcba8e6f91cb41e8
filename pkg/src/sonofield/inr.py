"""Coordinate network mapping a 3-D position to five tissue parameters."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

PARAM_NAMES = ("alpha", "beta", "rho_b", "rho_s", "phi")


@dataclass(frozen=True)
class EncodingConfig:
    frequencies: int = 10
    include_input: bool = False

    def __post_init__(self):
        if self.frequencies < 0:
            raise ValueError("frequency count must be non-negative")

    @property
    def raw_input(self) -> bool:
        # with no frequencies the raw coordinates are the only usable input
        return self.include_input or self.frequencies == 0

    @property
    def dim(self) -> int:
        return 6 * self.frequencies + (3 if self.raw_input else 0)


@dataclass(frozen=True)
class MlpConfig:
    width: int = 256
    depth: int = 8
    skip: int = 5
    out_dim: int = 5

    def __post_init__(self):
        if self.width <= 0 or self.depth <= 0 or self.out_dim <= 0:
            raise ValueError("MLP sizes must be positive")
        if not 0 < self.skip < self.depth:
            raise ValueError(f"skip index {self.skip} outside hidden layers 1..{self.depth - 1}")


class TissueTensors(NamedTuple):
    alpha: Tensor
    beta: Tensor
    rho_b: Tensor
    rho_s: Tensor
    phi: Tensor


def positional_encode(points: np.ndarray, cfg: EncodingConfig) -> np.ndarray:
    """Interleaved ``sin(2^k pi p), cos(2^k pi p)`` per coordinate, k = 0..L-1.

    Output layout per point is ``[gamma(x), gamma(y), gamma(z)]`` with each
    block of length 2L; raw coordinates are prepended only when
    ``cfg.raw_input`` holds.
    """
    p = np.asarray(points)
    scales = (2.0 ** np.arange(cfg.frequencies)) * np.pi
    arg = p[..., :, None] * scales  # (..., 3, L)
    enc = np.stack([np.sin(arg), np.cos(arg)], axis=-1).reshape(*p.shape[:-1], 6 * cfg.frequencies)
    if cfg.raw_input:
        enc = np.concatenate([p, enc], axis=-1)
    return enc


def layer_shapes(enc: EncodingConfig, mlp: MlpConfig) -> list[tuple[int, int]]:
    shapes = []
    fan_in = enc.dim
    for i in range(mlp.depth):
        if i == mlp.skip:
            fan_in += enc.dim
        shapes.append((fan_in, mlp.width))
        fan_in = mlp.width
    shapes.append((fan_in, mlp.out_dim))
    return shapes


def init_weights(seed: int, enc: EncodingConfig, mlp: MlpConfig, dtype=np.float32) -> list[np.ndarray]:
    """Glorot-uniform weights and zero biases, flattened as [W0, b0, W1, b1, ...]."""
    rng = np.random.default_rng(seed)
    params = []
    for fan_in, fan_out in layer_shapes(enc, mlp):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
        params.append(np.zeros(fan_out, dtype=dtype))
    return params


def mlp_forward(encoded, params: Sequence, mlp: MlpConfig) -> Tensor:
    """ReLU trunk with the encoded input concatenated back in before layer ``skip``."""
    x = dc.as_tensor(encoded)
    params = [dc.as_tensor(p, dtype=x.dtype) for p in params]
    h = x
    for i in range(mlp.depth):
        if i == mlp.skip:
            h = dc.concat([h, x], axis=1)
        h = dc.relu(h @ params[2 * i] + params[2 * i + 1])
    return h @ params[2 * mlp.depth] + params[2 * mlp.depth + 1]


def field_query(points: np.ndarray, params: Sequence, enc: EncodingConfig, mlp: MlpConfig) -> TissueTensors:
    """Tissue parameters at normalized positions ``points`` of shape (N, 3).

    Attenuation goes through ``abs``; the four probability-like channels
    through a sigmoid.
    """
    if mlp.out_dim != 5:
        raise ValueError(f"tissue field needs a 5-channel head, got {mlp.out_dim}")
    dtype = params[0].dtype
    encoded = Tensor(positional_encode(points, enc), dtype=dtype)
    raw = mlp_forward(encoded, params, mlp)
    alpha = dc.tabs(raw[:, 0])
    rest = dc.sigmoid(raw[:, 1:])
    return TissueTensors(alpha, rest[:, 0], rest[:, 1], rest[:, 2], rest[:, 3])


def intensity_query(points: np.ndarray, params: Sequence, enc: EncodingConfig, mlp: MlpConfig) -> Tensor:
    """Single sigmoid intensity per point (the no-rendering baseline head)."""
    if mlp.out_dim != 1:
        raise ValueError(f"intensity head must have 1 channel, got {mlp.out_dim}")
    dtype = params[0].dtype
    encoded = Tensor(positional_encode(points, enc), dtype=dtype)
    return dc.sigmoid(mlp_forward(encoded, params, mlp)[:, 0])
