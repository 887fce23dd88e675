"""
Component ablation and one-parameter sweeps on a synthetic dataset.

Each run trains from scratch with a different model seed on the same
synthetic split and evaluates on its held-out query/gallery identities.
Results are reported as medians over seeds.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ValidationError

from .config import Config
from .dataset import DatasetIndex, generate_synthetic_dataset
from .errors import ConfigError, ContractError
from .trainer import evaluate_model, train

logger = logging.getLogger(__name__)

# variant -> config overrides; the drop branch always pairs with the global branch
VARIANTS: Dict[str, Dict] = {
    "full": {},
    "global": {"use_drop": False, "use_channel_attention": False, "use_spatial_attention": False},
    "sta": {"use_channel_attention": False, "use_spatial_attention": False},
    "sta_sa": {"use_channel_attention": False},
    "sta_ca": {"use_spatial_attention": False},
    "sa_ca": {"use_drop": False},
    "bdb": {"drop_mode": "random_block", "use_channel_attention": False, "use_spatial_attention": False},
}

SWEEPABLE = ("alpha", "rho", "p", "n_per")
INTEGER_SWEEPS = ("p", "n_per")


class RunSummary(BaseModel):
    name: str
    seeds: List[int]
    mAP: List[float]
    rank1: List[float]
    median_mAP: float
    median_rank1: float


def with_overrides(config: Config, overrides: Dict) -> Config:
    try:
        return Config(**{**config.model_dump(), **overrides})
    except ValidationError as e:
        raise ConfigError(f"invalid override {overrides}: {e.errors()[0]['msg']}") from e


def synthetic_splits(n_ids: int = 20, per_id: int = 8, n_cams: int = 2, seed: int = 0,
                     height: int = 64, width: int = 32) -> Tuple[DatasetIndex, DatasetIndex, DatasetIndex]:
    index = generate_synthetic_dataset(n_ids, per_id, n_cams, seed, height, width, split=True)
    return index.by_split("train"), index.by_split("query"), index.by_split("gallery")


def run_seeds(name: str, config: Config, splits: Tuple[DatasetIndex, DatasetIndex, DatasetIndex],
              seeds: Sequence[int]) -> RunSummary:
    train_split, query, gallery = splits
    maps: List[float] = []
    rank1: List[float] = []
    for seed in seeds:
        run_config = with_overrides(config, {"seed": seed})
        result = train(run_config, train_split)
        report = evaluate_model(result.params, run_config, query, gallery)
        maps.append(report.mAP)
        rank1.append(report.rank(1))
        logger.info(f"{name} seed {seed}: mAP {report.mAP:.4f}, Rank-1 {report.rank(1):.4f}")
    return RunSummary(name=name, seeds=list(seeds), mAP=maps, rank1=rank1,
                      median_mAP=float(np.median(maps)), median_rank1=float(np.median(rank1)))


def run_ablation(config: Config, variants: Optional[Sequence[str]] = None, seeds: Sequence[int] = range(5),
                 splits: Optional[Tuple[DatasetIndex, DatasetIndex, DatasetIndex]] = None) -> Dict[str, RunSummary]:
    names = list(VARIANTS) if variants is None else list(variants)
    unknown = [n for n in names if n not in VARIANTS]
    if unknown:
        raise ContractError(f"unknown ablation variant(s) {unknown}; choose from {sorted(VARIANTS)}")
    if splits is None:
        splits = synthetic_splits(height=config.image_height, width=config.image_width)
    return {name: run_seeds(name, with_overrides(config, VARIANTS[name]), splits, seeds) for name in names}


def parse_sweep(text: str) -> Tuple[str, List[Union[int, float]]]:
    """`alpha=0.5,0.6,0.7` -> ("alpha", [0.5, 0.6, 0.7]); `p=4,8` -> ("p", [4, 8])."""
    if "=" not in text:
        raise ContractError(f"sweep must look like 'alpha=0.5,0.6', got {text!r}")
    key, raw = (part.strip() for part in text.split("=", 1))
    if key not in SWEEPABLE:
        raise ContractError(f"cannot sweep {key!r}; choose from {SWEEPABLE}")
    cast = int if key in INTEGER_SWEEPS else float
    try:
        values = [cast(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        kind = "integers" if cast is int else "numbers"
        raise ContractError(f"{key} sweep values must be {kind}, got {raw!r}") from None
    if not values:
        raise ContractError("sweep needs at least one value")
    return key, values


def run_sweep(config: Config, key: str, values: Sequence[Union[int, float]], seeds: Sequence[int] = range(5),
              splits: Optional[Tuple[DatasetIndex, DatasetIndex, DatasetIndex]] = None) -> Dict[str, RunSummary]:
    if splits is None:
        splits = synthetic_splits(height=config.image_height, width=config.image_width)
    results: Dict[str, RunSummary] = {}
    for value in values:
        name = f"{key}={value:g}"
        results[name] = run_seeds(name, with_overrides(config, {key: value}), splits, seeds)
    return results
