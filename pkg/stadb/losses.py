"""
Label-prediction loss, soft-margin batch-hard triplet loss and the P×K sampler.

  L    = L_lp + L_ml
  L_lp = -mean_n log softmax(logits)[n, y_n]
  L_ml = sum_q softplus( max_pos D(q, p) - min_neg D(q, m) )
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

logger = logging.getLogger(__name__)

REDUCTIONS = ("mean", "sum")

# added under the square root in the distance gradient only
DISTANCE_EPS = 1e-12


def _reduce(x: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return T.mean(x)
    if reduction == "sum":
        return T.sum_all(x)
    raise ContractError(f"unknown reduction {reduction!r}")


def cross_entropy(logits: Tensor, labels: Sequence[int], reduction: str = "mean") -> Tensor:
    if logits.ndim != 2:
        raise DimensionError(f"logits must be N×K, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (n,):
        raise DimensionError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    picked = T.take(T.log_softmax_rows(logits), np.arange(n), labels)
    return T.mul(_reduce(picked, reduction), -1.0)


def pairwise_distances(emb: Tensor) -> Tensor:
    """Euclidean distance matrix, exactly zero on the diagonal."""
    if emb.ndim != 2:
        raise DimensionError(f"embeddings must be N×D, got {emb.shape}")
    e = emb.data
    diff = e[:, None, :] - e[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    dist = np.sqrt(np.maximum(sq, 0.0))
    np.fill_diagonal(dist, 0.0)
    denom = np.sqrt(sq + DISTANCE_EPS)

    def _backward(g):
        w = (g + g.T) / denom
        np.fill_diagonal(w, 0.0)
        return (w.sum(axis=1, keepdims=True) * e - w @ e,)

    return T.record(dist, (emb,), "pairwise_distances", _backward)


@dataclass
class HardPairs:
    hp: Tensor                 # hardest-positive distance per anchor
    hn: Tensor                 # hardest-negative distance per anchor
    positive: np.ndarray       # index of the hardest positive
    negative: np.ndarray       # index of the hardest negative


def batch_hard(D: Tensor, labels: Sequence[int]) -> HardPairs:
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise DimensionError(f"distance matrix must be square, got {D.shape}")
    labels = np.asarray(labels)
    if labels.shape != (D.shape[0],):
        raise DimensionError(f"{labels.size} labels for a {D.shape[0]}-sample batch")
    ids, counts = np.unique(labels, return_counts=True)
    if ids.size < 2:
        raise ContractError("batch-hard mining needs at least two identities")
    if counts.min() < 2:
        lonely = ids[counts < 2].tolist()
        raise ContractError(f"identities with a single sample in the batch: {lonely}")

    d = D.data
    same = labels[:, None] == labels[None, :]
    positive = np.where(same, d, -np.inf).argmax(axis=1)
    negative = np.where(same, np.inf, d).argmin(axis=1)
    anchors = np.arange(d.shape[0])
    return HardPairs(
        hp=T.take(D, anchors, positive),
        hn=T.take(D, anchors, negative),
        positive=positive,
        negative=negative,
    )


def soft_margin_triplet(hp: Tensor, hn: Tensor, reduction: str = "sum") -> Tensor:
    if hp.shape != hn.shape:
        raise DimensionError(f"hp {hp.shape} and hn {hn.shape} differ")
    return _reduce(T.softplus(T.sub(hp, hn)), reduction)


def total_loss(lp: Tensor, ml: Tensor) -> Tensor:
    return T.add(lp, ml)


# ==========================================
# P×K batches
# ==========================================

@dataclass(frozen=True)
class PKBatchSpec:
    P: int
    N_per: int

    def __post_init__(self):
        if self.P < 2 or self.N_per < 2:
            raise ContractError(f"P×K batches need P >= 2 and N_per >= 2, got {self.P}×{self.N_per}")

    @property
    def batch_size(self) -> int:
        return self.P * self.N_per


def pk_sample(labels: Sequence[int], spec: PKBatchSpec, rng: np.random.Generator) -> List[int]:
    """P distinct identities, N_per dataset indices each (with replacement when short)."""
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if ids.size < spec.P:
        raise ContractError(f"dataset has {ids.size} identities, batch needs {spec.P}")

    batch: List[int] = []
    for identity in ids[rng.choice(ids.size, size=spec.P, replace=False)]:
        members = np.flatnonzero(labels == identity)
        short = members.size < spec.N_per
        if short:
            logger.warning(f"identity {identity} has {members.size} images, resampling to {spec.N_per}")
        batch.extend(int(i) for i in rng.choice(members, size=spec.N_per, replace=short))
    return batch
