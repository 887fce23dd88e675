"""
Backbone + global / attention / drop branches.

Training always runs the global branch plus exactly one auxiliary branch
(drop with probability rho, attention otherwise). Inference embeds with
[global ‖ attention]; the drop branch is training-only.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .adadrop import DropMask, apply_drop, attention_map, drop_mask, random_block_mask
from .attention import ChannelAttentionParams, SpatialAttentionParams, cbam
from .config import Config
from .dataset import Batch
from .errors import ContractError, DimensionError
from .losses import batch_hard, cross_entropy, pairwise_distances, soft_margin_triplet, total_loss
from .tensor import Tensor

logger = logging.getLogger(__name__)


class BranchTag(str, Enum):
    GLOBAL = "global"
    ATTENTION = "attention"
    DROP = "drop"


# ==========================================
# Parameters
# ==========================================

class ModelParams:
    """Named learnable tensors of backbone and branches."""

    def __init__(self, tensors: "OrderedDict[str, Tensor]"):
        self.tensors = OrderedDict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def get(self, name: str) -> Optional[Tensor]:
        return self.tensors.get(name)

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.tensors.values())

    def zero_grad(self) -> None:
        T.zero_grad(list(self.tensors.values()))

    def with_grad(self) -> Dict[str, Tensor]:
        """Tensors the last backward pass reached."""
        return {name: t for name, t in self.tensors.items() if t.grad is not None}

    @property
    def num_classes(self) -> int:
        return self.tensors["global.cls.weight"].shape[0]

    def branches(self) -> List[BranchTag]:
        tags = [BranchTag.GLOBAL]
        if "attention.fc.weight" in self.tensors:
            tags.append(BranchTag.ATTENTION)
        if "drop.fc.weight" in self.tensors:
            tags.append(BranchTag.DROP)
        return tags

    def channel_attention(self) -> Optional[ChannelAttentionParams]:
        if "attention.channel.w1" not in self.tensors:
            return None
        return ChannelAttentionParams(
            self["attention.channel.w1"], self["attention.channel.w2"],
            self.get("attention.channel.b1"), self.get("attention.channel.b2"),
        )

    def spatial_attention(self) -> Optional[SpatialAttentionParams]:
        kernel = self.get("attention.spatial.kernel")
        if kernel is None:
            return None
        merge = "shared_sum" if kernel.shape[1] == 1 else "concat"
        return SpatialAttentionParams(kernel, merge)


def _he(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), shape), requires_grad=True)


def _zeros(shape: Tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_params(config: Config, num_classes: int, seed: Optional[int] = None) -> ModelParams:
    if num_classes < 2:
        raise ContractError(f"need at least two identities to classify, got {num_classes}")
    rng = np.random.default_rng(config.seed if seed is None else seed)
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()

    c_in = 3
    for i, c_out in enumerate(config.backbone_channels):
        tensors[f"backbone.{i}.weight"] = _he(rng, (c_out, c_in, 3, 3), c_in * 9)
        tensors[f"backbone.{i}.bias"] = _zeros((c_out,))
        c_in = c_out
    c = c_in

    def _fc(name: str, d_in: int, d_out: int):
        tensors[f"{name}.weight"] = _he(rng, (d_out, d_in), d_in)
        tensors[f"{name}.bias"] = _zeros((d_out,))

    _fc("global.fc1", c, config.d1)
    _fc("global.fc2", config.d1, config.d2)
    _fc("global.cls", config.d2, num_classes)

    if config.has_attention_branch:
        if config.use_channel_attention:
            cp = ChannelAttentionParams.init(c, config.reduction, rng, bias=config.mlp_bias)
            tensors["attention.channel.w1"] = cp.w1
            tensors["attention.channel.w2"] = cp.w2
            if cp.b1 is not None:
                tensors["attention.channel.b1"] = cp.b1
                tensors["attention.channel.b2"] = cp.b2
        if config.use_spatial_attention:
            sp = SpatialAttentionParams.init(config.spatial_kernel, rng, merge=config.spatial_merge)
            tensors["attention.spatial.kernel"] = sp.kernel
        _fc("attention.fc", c, config.d2)
        _fc("attention.cls", config.d2, num_classes)

    if config.use_drop:
        _fc("drop.fc", c, config.d2)
        _fc("drop.cls", config.d2, num_classes)

    for name, t in tensors.items():
        t.name = name
    params = ModelParams(tensors)
    logger.debug(f"Initialised {len(params)} tensors, {params.count()} parameters")
    return params


# ==========================================
# Forward
# ==========================================

@dataclass
class BranchOutput:
    embedding: Tensor          # N×D_emb
    logits: Tensor             # N×K
    tag: BranchTag
    mask: Optional[DropMask] = None


def backbone_forward(images: Tensor, params: ModelParams, config: Config) -> Tensor:
    """3×3 conv + relu stages; the last stride-1 stage keeps the resolution."""
    if images.ndim != 4 or images.shape[1] != 3:
        raise DimensionError(f"images must be N×3×H×W, got {images.shape}")
    if images.shape[2:] != (config.image_height, config.image_width):
        raise DimensionError(
            f"images are {images.shape[2]}×{images.shape[3]}, "
            f"model expects {config.image_height}×{config.image_width}")
    x = images
    for i, stride in enumerate(config.backbone_strides):
        x = T.relu(T.conv2d(x, params[f"backbone.{i}.weight"], params[f"backbone.{i}.bias"],
                            stride=stride, padding=1))
    return x


def _head(pooled: Tensor, params: ModelParams, prefix: str) -> Tuple[Tensor, Tensor]:
    emb = T.linear(T.flatten(pooled), params[f"{prefix}.fc.weight"], params[f"{prefix}.fc.bias"])
    logits = T.linear(emb, params[f"{prefix}.cls.weight"], params[f"{prefix}.cls.bias"])
    return emb, logits


def branch_forward(featmap: Tensor, kind: BranchTag, params: ModelParams, config: Config,
                   mask_source: Optional[Tensor] = None,
                   rng: Optional[np.random.Generator] = None) -> BranchOutput:
    """Run one branch head on a backbone feature map.

    `mask_source` is the feature map the drop mask is derived from
    (defaults to `featmap`); random_block mode needs `rng`.
    """
    try:
        kind = BranchTag(kind)
    except ValueError:
        raise ContractError(f"unknown branch {kind!r}") from None
    if kind not in params.branches():
        raise ContractError(f"branch {kind.value!r} is disabled in this model")

    if kind is BranchTag.GLOBAL:
        hidden = T.relu(T.linear(T.flatten(T.pool(featmap, "gap")),
                                 params["global.fc1.weight"], params["global.fc1.bias"]))
        emb = T.linear(hidden, params["global.fc2.weight"], params["global.fc2.bias"])
        logits = T.linear(emb, params["global.cls.weight"], params["global.cls.bias"])
        return BranchOutput(emb, logits, kind)

    if kind is BranchTag.ATTENTION:
        attended = cbam(featmap, params.channel_attention(), params.spatial_attention())
        emb, logits = _head(T.pool(attended, "gap"), params, "attention")
        return BranchOutput(emb, logits, kind)

    if config.drop_mode == "random_block":
        if rng is None:
            raise ContractError("random_block drop needs a seeded generator")
        mask = random_block_mask(featmap.shape, config.block_ratio_h, config.block_ratio_w, rng)
    else:
        source = featmap if mask_source is None else mask_source
        with T.no_grad():
            amap = attention_map(source, config.attention_pooling)
        mask = drop_mask(amap, config.alpha, config.drop_mode, config.drop_quantile)
    dropped = apply_drop(featmap, mask)
    emb, logits = _head(T.pool(dropped, config.drop_pooling), params, "drop")
    return BranchOutput(emb, logits, kind, mask)


def select_branch(rho: float, rng: np.random.Generator) -> BranchTag:
    """Drop with probability rho, attention otherwise; one uniform draw."""
    if not 0.0 <= rho <= 1.0:
        raise ContractError(f"rho must be in [0, 1], got {rho}")
    return BranchTag.DROP if rng.random() < rho else BranchTag.ATTENTION


def auxiliary_branch(params: ModelParams, rho: float, rng: np.random.Generator) -> Optional[BranchTag]:
    available = params.branches()
    has_attention = BranchTag.ATTENTION in available
    has_drop = BranchTag.DROP in available
    if has_attention and has_drop:
        return select_branch(rho, rng)
    if has_drop:
        return BranchTag.DROP
    if has_attention:
        return BranchTag.ATTENTION
    return None


@dataclass
class BranchLoss:
    ce: Tensor
    triplet: Tensor

    @property
    def total(self) -> Tensor:
        return total_loss(self.ce, self.triplet)


def branch_loss(output: BranchOutput, labels, config: Config) -> BranchLoss:
    ce = cross_entropy(output.logits, labels, config.ce_reduction)
    pairs = batch_hard(pairwise_distances(output.embedding), labels)
    return BranchLoss(ce, soft_margin_triplet(pairs.hp, pairs.hn, config.triplet_reduction))


@dataclass
class TrainStep:
    loss: Tensor
    components: Dict[str, Dict[str, float]] = field(default_factory=dict)
    selected: Optional[BranchTag] = None
    outputs: Dict[str, BranchOutput] = field(default_factory=dict)


def train_forward(batch: Batch, params: ModelParams, config: Config, rng: np.random.Generator,
                  rho: Optional[float] = None, alpha: Optional[float] = None) -> TrainStep:
    """Global branch plus one selected auxiliary branch; loss summed over both."""
    if alpha is not None:
        config = config.model_copy(update={"alpha": alpha})
    rho = config.rho if rho is None else rho

    selected = auxiliary_branch(params, rho, rng)
    featmap = backbone_forward(batch.images, params, config)

    active = [BranchTag.GLOBAL] + ([selected] if selected is not None else [])
    branch_totals: List[Tensor] = []
    components: Dict[str, Dict[str, float]] = {}
    outputs: Dict[str, BranchOutput] = {}
    for tag in active:
        output = branch_forward(featmap, tag, params, config, rng=rng)
        losses = branch_loss(output, batch.labels, config)
        branch_totals.append(losses.total)
        outputs[tag.value] = output
        components[tag.value] = {"ce": losses.ce.item(), "triplet": losses.triplet.item()}

    loss = branch_totals[0]
    for value in branch_totals[1:]:
        loss = T.add(loss, value)
    return TrainStep(loss, components, selected, outputs)


def inference_embedding(images: Tensor, params: ModelParams, config: Config) -> Tensor:
    """[global ‖ attention] embedding; consumes no random draws."""
    with T.no_grad():
        featmap = backbone_forward(images, params, config)
        parts = [branch_forward(featmap, BranchTag.GLOBAL, params, config).embedding]
        if BranchTag.ATTENTION in params.branches():
            parts.append(branch_forward(featmap, BranchTag.ATTENTION, params, config).embedding)
        return T.concat(parts, axis=1) if len(parts) > 1 else parts[0]


def embed_images(images: np.ndarray, params: ModelParams, config: Config, batch_size: int = 64) -> np.ndarray:
    chunks = [
        inference_embedding(Tensor(images[start:start + batch_size]), params, config).data
        for start in range(0, images.shape[0], batch_size)
    ]
    return np.concatenate(chunks, axis=0)
