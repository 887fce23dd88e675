"""
Retrieval evaluation: junk filtering, ranking, AP / mAP and CMC Rank-k.

Per query, gallery entries with identity -1 (distractors) and entries that
share both identity and camera with the query are removed before ranking.
The remainder is sorted by Euclidean distance, ties by gallery index.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from .errors import ContractError, DimensionError, EvaluationError

logger = logging.getLogger(__name__)

JUNK_IDENTITY = -1


@dataclass
class GalleryItem:
    embedding: np.ndarray
    identity: int
    camera: int


def make_items(embeddings: np.ndarray, identities: Sequence[int], cameras: Sequence[int]) -> List[GalleryItem]:
    if not (len(embeddings) == len(identities) == len(cameras)):
        raise DimensionError(f"{len(embeddings)} embeddings, {len(identities)} ids, {len(cameras)} cameras")
    return [GalleryItem(np.asarray(e, dtype=np.float64), int(i), int(c))
            for e, i, c in zip(embeddings, identities, cameras)]


class EvalReport(BaseModel):
    mAP: float
    cmc: List[float]                 # Rank-1 .. Rank-k_max
    ap: List[float]                  # per valid query, in query order
    valid_queries: int
    skipped_queries: int

    def rank(self, k: int) -> float:
        if not 1 <= k <= len(self.cmc):
            raise ContractError(f"Rank-{k} outside 1..{len(self.cmc)}")
        return self.cmc[k - 1]

    def summary(self) -> Dict[str, float]:
        out: Dict[str, float] = {"mAP": self.mAP}
        for k in (1, 5, 10):
            if k <= len(self.cmc):
                out[f"rank{k}"] = self.cmc[k - 1]
        out["skipped_queries"] = self.skipped_queries
        return out


def _stack(gallery: Sequence[GalleryItem]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    widths = {item.embedding.shape for item in gallery}
    if len(widths) != 1:
        raise DimensionError(f"gallery embeddings have mixed shapes {sorted(widths)}")
    feats = np.stack([item.embedding for item in gallery])
    ids = np.array([item.identity for item in gallery])
    cams = np.array([item.camera for item in gallery])
    return feats, ids, cams


def _ranked(query: GalleryItem, feats: np.ndarray, ids: np.ndarray, cams: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if query.embedding.shape != feats.shape[1:]:
        raise DimensionError(f"query width {query.embedding.shape} does not match gallery {feats.shape[1:]}")
    junk = (ids == JUNK_IDENTITY) | ((ids == query.identity) & (cams == query.camera))
    keep = np.flatnonzero(~junk)
    diff = feats[keep] - query.embedding
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    order = np.argsort(dist, kind="stable")
    return keep[order], dist[order]


def rank_and_filter(query: GalleryItem, gallery: Sequence[GalleryItem]) -> List[Tuple[int, float]]:
    """(gallery index, distance) pairs after junk removal, nearest first."""
    if not gallery:
        raise ContractError("gallery is empty")
    feats, ids, cams = _stack(gallery)
    indices, dist = _ranked(query, feats, ids, cams)
    return [(int(i), float(d)) for i, d in zip(indices, dist)]


def average_precision(flags: Sequence[int]) -> float:
    """Mean over relevant ranks r of precision@r."""
    flags = np.asarray(flags, dtype=bool)
    relevant = np.flatnonzero(flags)
    if relevant.size == 0:
        raise EvaluationError("no relevant item in the ranking")
    hits = np.arange(1, relevant.size + 1)
    return float(np.mean(hits / (relevant + 1)))


def evaluate(queries: Sequence[GalleryItem], gallery: Sequence[GalleryItem], k_max: int = 10) -> EvalReport:
    if k_max < 1:
        raise ContractError(f"k_max must be positive, got {k_max}")
    if not gallery:
        raise ContractError("gallery is empty")
    feats, ids, cams = _stack(gallery)

    aps: List[float] = []
    hits = np.zeros(k_max)
    skipped = 0
    for query in queries:
        order, _ = _ranked(query, feats, ids, cams)
        flags = ids[order] == query.identity
        if not flags.any():
            skipped += 1
            continue
        aps.append(average_precision(flags))
        first = int(np.argmax(flags))
        if first < k_max:
            hits[first:] += 1

    if not aps:
        raise EvaluationError(f"none of the {len(queries)} queries has a relevant gallery entry")
    if skipped:
        logger.warning(f"Skipped {skipped} queries without a relevant gallery entry")

    return EvalReport(
        mAP=float(np.mean(aps)),
        cmc=(hits / len(aps)).tolist(),
        ap=aps,
        valid_queries=len(aps),
        skipped_queries=skipped,
    )
