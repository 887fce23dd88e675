"""
Channel and spatial attention (CBAM order: channel first, then spatial).

  Mc  = sigmoid(MLP(gap(F)) + MLP(gmp(F)))                  N×C×1×1
  Fc  = Mc * F
  Ms  = sigmoid(conv(channel_avg(Fc)) + conv(channel_max(Fc)))  N×1×H×W
  Fsc = Ms * Fc
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

logger = logging.getLogger(__name__)

SPATIAL_MERGES = ("shared_sum", "concat")


def clamp_reduction(channels: int, reduction: int) -> int:
    """Largest ratio <= `reduction` that divides `channels`."""
    r = max(1, min(reduction, channels))
    while channels % r:
        r -= 1
    return r


@dataclass
class ChannelAttentionParams:
    w1: Tensor                   # C/r × C
    w2: Tensor                   # C × C/r
    b1: Optional[Tensor] = None
    b2: Optional[Tensor] = None

    def __post_init__(self):
        hidden, channels = self.w1.shape
        if self.w2.shape != (channels, hidden):
            raise DimensionError(f"MLP layers {self.w1.shape} and {self.w2.shape} do not chain")
        if channels % hidden:
            raise ContractError(f"hidden width {hidden} is not C/r for C={channels}")

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    @property
    def reduction(self) -> int:
        return self.w1.shape[1] // self.w1.shape[0]

    @classmethod
    def init(cls, channels: int, reduction: int, rng: np.random.Generator,
             bias: bool = False) -> "ChannelAttentionParams":
        r = clamp_reduction(channels, reduction)
        if r != reduction:
            logger.debug(f"channel attention: reduction {reduction} clamped to {r} for C={channels}")
        hidden = channels // r
        w1 = Tensor(rng.normal(0.0, np.sqrt(2.0 / channels), (hidden, channels)), requires_grad=True)
        w2 = Tensor(rng.normal(0.0, np.sqrt(1.0 / hidden), (channels, hidden)), requires_grad=True)
        b1 = Tensor(np.zeros(hidden), requires_grad=True) if bias else None
        b2 = Tensor(np.zeros(channels), requires_grad=True) if bias else None
        return cls(w1, w2, b1, b2)


@dataclass
class SpatialAttentionParams:
    kernel: Tensor               # 1×1×k×k (shared_sum) or 1×2×k×k (concat)
    merge: str = "shared_sum"

    def __post_init__(self):
        if self.merge not in SPATIAL_MERGES:
            raise ContractError(f"unknown spatial merge {self.merge!r}")
        expected_in = 1 if self.merge == "shared_sum" else 2
        shape = self.kernel.shape
        if len(shape) != 4 or shape[:2] != (1, expected_in) or shape[2] != shape[3]:
            raise DimensionError(f"spatial kernel {shape} invalid for merge {self.merge!r}")
        if shape[2] % 2 == 0:
            raise ContractError(f"spatial kernel size must be odd, got {shape[2]}")

    @property
    def kernel_size(self) -> int:
        return self.kernel.shape[2]

    @classmethod
    def init(cls, kernel_size: int, rng: np.random.Generator,
             merge: str = "shared_sum") -> "SpatialAttentionParams":
        c_in = 1 if merge == "shared_sum" else 2
        fan_in = c_in * kernel_size * kernel_size
        kernel = rng.normal(0.0, np.sqrt(1.0 / fan_in), (1, c_in, kernel_size, kernel_size))
        return cls(Tensor(kernel, requires_grad=True), merge)


def _shared_mlp(x: Tensor, params: ChannelAttentionParams) -> Tensor:
    hidden = T.relu(T.linear(x, params.w1, params.b1))
    return T.linear(hidden, params.w2, params.b2)


def channel_attention(F: Tensor, params: ChannelAttentionParams) -> Tuple[Tensor, Tensor]:
    if F.ndim != 4:
        raise DimensionError(f"channel attention needs N×C×H×W, got {F.shape}")
    n, c = F.shape[:2]
    if c != params.channels:
        raise DimensionError(f"feature map has {c} channels, attention expects {params.channels}")
    avg = T.flatten(T.pool(F, "gap"))
    mx = T.flatten(T.pool(F, "gmp"))
    logits = T.add(_shared_mlp(avg, params), _shared_mlp(mx, params))
    mc = T.reshape(T.sigmoid(logits), (n, c, 1, 1))
    return mc, T.broadcast_mul(F, mc)


def spatial_attention(Fc: Tensor, params: SpatialAttentionParams) -> Tuple[Tensor, Tensor]:
    if Fc.ndim != 4:
        raise DimensionError(f"spatial attention needs N×C×H×W, got {Fc.shape}")
    pad = (params.kernel_size - 1) // 2
    avg = T.pool(Fc, "channel_avg")
    mx = T.pool(Fc, "channel_max")
    if params.merge == "shared_sum":
        logits = T.add(T.conv2d(avg, params.kernel, padding=pad),
                       T.conv2d(mx, params.kernel, padding=pad))
    else:
        logits = T.conv2d(T.concat([avg, mx], axis=1), params.kernel, padding=pad)
    ms = T.sigmoid(logits)
    return ms, T.broadcast_mul(Fc, ms)


def cbam(F: Tensor, cp: Optional[ChannelAttentionParams],
         sp: Optional[SpatialAttentionParams]) -> Tensor:
    """Channel then spatial attention. A stage whose params are None is skipped."""
    out = F
    if cp is not None:
        _, out = channel_attention(out, cp)
    if sp is not None:
        _, out = spatial_attention(out, sp)
    return out
