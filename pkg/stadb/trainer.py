"""
Learning-rate schedule and the single-threaded training loop.

One iteration: pk_sample -> train_forward -> backward -> adam_step -> zero_grad.
Each epoch appends one JSON object to `<out>/log.jsonl`; checkpoints go to
`<out>/checkpoint_XXXX.stdb`.
"""

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .config import Config
from .dataset import DatasetIndex, make_batch
from .errors import ContractError
from .evaluation import EvalReport, evaluate, make_items
from .losses import PKBatchSpec, pk_sample
from .net import BranchTag, ModelParams, embed_images, init_params, train_forward
from .optim import AdamState, adam_step

logger = logging.getLogger(__name__)

# Anchor values of the schedule at base = 1e-4; other bases rescale all of them.
REFERENCE_BASE = 1e-4
DECAY1_LR = 1e-4
DECAY2_LR = 1e-5

LOG_NAME = "log.jsonl"


def lr_schedule(ep: int, base: float, warmup_epochs: int = 50, warmup_step: int = 5,
                decay1_epoch: int = 200, decay2_epoch: int = 300) -> float:
    """Staircase warmup, hold, then two decays.

    ep < warmup:            base * (ep // step + 1)
    warmup <= ep < decay1:  value of the last warmup epoch
    decay1 <= ep < decay2:  1e-4 * base / 1e-4
    ep >= decay2:           1e-5 * base / 1e-4
    """
    if ep < 0:
        raise ContractError(f"epoch must be non-negative, got {ep}")
    if base <= 0:
        raise ContractError(f"base learning rate must be positive, got {base}")
    scale = base / REFERENCE_BASE
    if ep >= decay2_epoch:
        return DECAY2_LR * scale
    if ep >= decay1_epoch:
        return DECAY1_LR * scale
    if ep < warmup_epochs:
        return base * (ep // warmup_step + 1)
    if warmup_epochs == 0:
        return base
    return base * ((warmup_epochs - 1) // warmup_step + 1)


def config_lr(config: Config, ep: int) -> float:
    return lr_schedule(ep, config.base_lr, config.lr_warmup_epochs, config.lr_warmup_step,
                       config.lr_decay1_epoch, config.lr_decay2_epoch)


def iterations_per_epoch(config: Config, n_train: int) -> int:
    if config.iters_per_epoch > 0:
        return config.iters_per_epoch
    return max(1, n_train // config.batch_size)


def apply_gradients(params: ModelParams, state: AdamState, lr: float) -> int:
    """Adam over the tensors that received a gradient, then reset gradients.

    The auxiliary branch that sat out the iteration is left untouched.
    """
    active = params.with_grad()
    adam_step(active, state, lr)
    params.zero_grad()
    return len(active)


def evaluate_model(params: ModelParams, config: Config, query: DatasetIndex,
                   gallery: DatasetIndex, k_max: Optional[int] = None) -> EvalReport:
    """Embed both splits with [global ‖ attention] and evaluate."""
    q = make_items(embed_images(query.images(), params, config), query.identities, query.cameras)
    g = make_items(embed_images(gallery.images(), params, config), gallery.identities, gallery.cameras)
    return evaluate(q, g, k_max=config.k_max if k_max is None else k_max)


@dataclass
class TrainResult:
    params: ModelParams
    state: AdamState
    records: List[Dict] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)


def _branch_means(sums: Dict[str, Dict[str, float]], counts: Dict[str, int]) -> Dict[str, Optional[Dict[str, float]]]:
    out: Dict[str, Optional[Dict[str, float]]] = {}
    for tag in BranchTag:
        n = counts.get(tag.value, 0)
        if n == 0:
            out[tag.value] = None
        else:
            out[tag.value] = {k: v / n for k, v in sums[tag.value].items()}
    return out


def train(config: Config, train_index: DatasetIndex,
          out_dir: Optional[Union[str, Path]] = None,
          eval_sets: Optional[Tuple[DatasetIndex, DatasetIndex]] = None,
          params: Optional[ModelParams] = None) -> TrainResult:
    """Run `config.epochs` epochs; the whole run is a function of config, seed and data."""
    if len(train_index) < config.batch_size:
        raise ContractError(f"batch of {config.p}×{config.n_per} exceeds the {len(train_index)} training images")

    class_map = train_index.class_map()
    labels = train_index.identities
    spec = PKBatchSpec(config.p, config.n_per)
    if params is None:
        params = init_params(config, len(class_map))
    elif params.num_classes != len(class_map):
        raise ContractError(f"model classifies {params.num_classes} ids, training split has {len(class_map)}")

    rng = np.random.default_rng(config.seed)
    state = AdamState()
    iters = iterations_per_epoch(config, len(train_index))
    logger.info(f"Training {params.count()} parameters on {len(train_index)} images "
                f"({len(class_map)} ids), {config.epochs} epochs × {iters} iterations")

    log_path: Optional[Path] = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / LOG_NAME
        log_path.write_text("", encoding="utf-8")

    result = TrainResult(params, state)
    for ep in range(config.epochs):
        started = time.perf_counter()
        lr = config_lr(config, ep)
        loss_sum = 0.0
        sums = {tag.value: {"ce": 0.0, "triplet": 0.0} for tag in BranchTag}
        counts: Dict[str, int] = {}
        drop_selected = 0

        for it in range(iters):
            batch = make_batch(train_index, pk_sample(labels, spec, rng), class_map)
            step = train_forward(batch, params, config, rng)
            loss = step.loss.item()
            if not np.isfinite(loss):
                logger.error(f"Non-finite loss at epoch {ep}, iteration {it}")
                raise ContractError(f"training diverged at epoch {ep}, iteration {it}")
            T.backward(step.loss)
            apply_gradients(params, state, lr)

            loss_sum += loss
            for tag, parts in step.components.items():
                counts[tag] = counts.get(tag, 0) + 1
                for key, value in parts.items():
                    sums[tag][key] += value
            if step.selected is BranchTag.DROP:
                drop_selected += 1
            logger.debug(f"epoch {ep} iter {it}: loss {loss:.5f} ({step.selected and step.selected.value})")

        record: Dict = {"epoch": ep, "lr": lr, "loss": loss_sum / iters}
        record.update(_branch_means(sums, counts))
        record["drop_selected"] = drop_selected
        record["iterations"] = iters

        if eval_sets is not None and config.eval_interval > 0 and (ep + 1) % config.eval_interval == 0:
            report = evaluate_model(params, config, *eval_sets)
            record["mAP"] = report.mAP
            record["rank1"] = report.rank(1)

        result.records.append(record)
        if log_path is not None:
            with log_path.open("a", encoding="utf-8") as f:
                f.write(json.dumps(record) + "\n")

        last = ep == config.epochs - 1
        if out_dir is not None and (last or (config.checkpoint_interval > 0
                                             and (ep + 1) % config.checkpoint_interval == 0)):
            path = out_dir / f"checkpoint_{ep + 1:04d}.stdb"
            save_checkpoint(params, config, path)
            result.checkpoints.append(path)

        logger.info(f"Epoch {ep + 1}/{config.epochs}: loss {record['loss']:.4f}, lr {lr:.2e}, "
                    f"{time.perf_counter() - started:.1f}s")

    return result

