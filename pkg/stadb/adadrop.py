"""
Self-thresholding drop mask.

The attention map is the channel-wise pooled feature map. Per sample,
every position whose value exceeds alpha times that sample's maximum is
erased (mask 0); every other position is kept (mask 1). Masks are
constants on the tape: gradients reach the feature map only through the
positions that survive.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

logger = logging.getLogger(__name__)

DROP_MODES = ("threshold", "quantile", "random_block")
ATTENTION_POOLINGS = ("mean", "max")


@dataclass
class AttentionMap:
    values: Tensor      # N×1×H×W

    @property
    def shape(self):
        return self.values.shape


@dataclass
class DropMask:
    values: Tensor      # N×1×H×W, entries 0.0 or 1.0, never on the tape
    alpha: float

    @property
    def shape(self):
        return self.values.shape


def attention_map(F: Tensor, pooling: str = "mean") -> AttentionMap:
    if pooling not in ATTENTION_POOLINGS:
        raise ContractError(f"unknown attention pooling {pooling!r}")
    kind = "channel_avg" if pooling == "mean" else "channel_max"
    return AttentionMap(T.pool(F, kind))


def drop_mask(A: AttentionMap, alpha: float, mode: str = "threshold", quantile: float = 0.2) -> DropMask:
    """Binary mask from an attention map.

    threshold: 0 where A > alpha * max(A) per sample (strict, so values equal
    to the threshold survive).
    quantile:  0 at the round(quantile*H*W) largest positions per sample,
    earlier positions first on ties.
    """
    if alpha <= 0:
        raise ContractError(f"alpha must be positive, got {alpha}")
    a = A.values.data
    if a.ndim != 4 or a.shape[1] != 1:
        raise DimensionError(f"attention map must be N×1×H×W, got {a.shape}")
    n = a.shape[0]
    flat = a.reshape(n, -1)

    if mode == "threshold":
        limit = alpha * flat.max(axis=1, keepdims=True)
        mask = np.where(flat > limit, 0.0, 1.0)
    elif mode == "quantile":
        if not 0 < quantile <= 1:
            raise ContractError(f"quantile must be in (0, 1], got {quantile}")
        k = int(round(quantile * flat.shape[1]))
        mask = np.ones_like(flat)
        if k:
            top = np.argsort(-flat, axis=1, kind="stable")[:, :k]
            np.put_along_axis(mask, top, 0.0, axis=1)
    else:
        raise ContractError(f"drop mode {mode!r} does not derive from an attention map")

    return DropMask(Tensor(mask.reshape(a.shape)), alpha)


def apply_drop(F: Tensor, M: DropMask) -> Tensor:
    if F.ndim != 4:
        raise DimensionError(f"apply_drop needs N×C×H×W, got {F.shape}")
    n, _, h, w = F.shape
    if M.shape != (n, 1, h, w):
        raise DimensionError(f"mask {M.shape} does not match feature map {F.shape}")
    return T.broadcast_mul(F, M.values)


def _block_extent(ratio: float, extent: int) -> int:
    return min(extent, max(1, int(np.floor(ratio * extent + 0.5))))


def random_block_mask(shape, ratio_h: float, ratio_w: float, rng: np.random.Generator) -> DropMask:
    """One block of round(ratio_h·H)×round(ratio_w·W), shared across the batch."""
    if not (0 < ratio_h <= 1 and 0 < ratio_w <= 1):
        raise ContractError(f"block ratios must be in (0, 1], got {ratio_h}, {ratio_w}")
    n, _, h, w = shape
    bh, bw = _block_extent(ratio_h, h), _block_extent(ratio_w, w)
    top = int(rng.integers(0, h - bh + 1))
    left = int(rng.integers(0, w - bw + 1))
    mask = np.ones((n, 1, h, w))
    mask[:, :, top:top + bh, left:left + bw] = 0.0
    return DropMask(Tensor(mask), alpha=float("nan"))


def random_block_drop(F: Tensor, ratio_h: float, ratio_w: float, rng: np.random.Generator) -> Tensor:
    if F.ndim != 4:
        raise DimensionError(f"random_block_drop needs N×C×H×W, got {F.shape}")
    return apply_drop(F, random_block_mask(F.shape, ratio_h, ratio_w, rng))


def drop_fraction(M: DropMask) -> np.ndarray:
    """Fraction of erased positions, one value per sample."""
    values = M.values.data
    return (values == 0.0).reshape(values.shape[0], -1).mean(axis=1)
