"""
Heatmap export: min-max normalised maps through a blue -> purple -> red ramp,
optionally upscaled (nearest neighbour) and blended over the input image.
One map per file; `export_heatmaps` splits a batch and normalises each
sample on its own.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .adadrop import attention_map, drop_mask
from .attention import channel_attention, spatial_attention
from .config import Config
from .dataset import encode_ppm, to_rgb8
from .errors import ContractError, DimensionError, PersistenceError
from .net import ModelParams, backbone_forward
from .tensor import Tensor

logger = logging.getLogger(__name__)

LOW = np.array([0.0, 0.0, 255.0])
MID = np.array([128.0, 0.0, 128.0])
HIGH = np.array([255.0, 0.0, 0.0])


def _as_2d(values: Union[np.ndarray, Tensor]) -> np.ndarray:
    array = values.data if isinstance(values, Tensor) else np.asarray(values, dtype=np.float64)
    while array.ndim > 2 and array.shape[0] == 1:
        array = array[0]
    if array.ndim != 2:
        raise DimensionError(f"heatmap needs a single H×W map, got shape {np.shape(values)}; "
                             "use export_heatmaps for a batch")
    if not np.isfinite(array).all():
        raise ContractError("heatmap values must be finite")
    return array


def normalize(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.full(values.shape, 0.5)
    return (values - lo) / (hi - lo)


def colormap(u: np.ndarray) -> np.ndarray:
    """[0, 1] -> H×W×3 uint8; 0 blue, 0.5 purple, 1 red."""
    u = np.clip(u, 0.0, 1.0)[..., None]
    lower = LOW + (u / 0.5) * (MID - LOW)
    upper = MID + ((u - 0.5) / 0.5) * (HIGH - MID)
    rgb = np.where(u <= 0.5, lower, upper)
    return np.floor(rgb + 0.5).astype(np.uint8)


def upscale_nearest(values: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = values.shape
    rows = (np.arange(height) * h) // height
    cols = (np.arange(width) * w) // width
    return values[np.ix_(rows, cols)]


def render_heatmap(values, image: Optional[np.ndarray] = None, weight: float = 0.5) -> np.ndarray:
    """H×W×3 uint8 heatmap; over `image` (3×H×W in [0, 1]) when given."""
    u = normalize(_as_2d(values))
    if image is None:
        return colormap(u)
    _, height, width = image.shape
    heat = colormap(upscale_nearest(u, height, width)).astype(np.float64)
    base = to_rgb8(image).astype(np.float64)
    return np.floor((1.0 - weight) * base + weight * heat + 0.5).astype(np.uint8)


def export_heatmap(values, path: Union[str, Path], image: Optional[np.ndarray] = None) -> None:
    rgb = render_heatmap(values, image)
    try:
        Path(path).write_bytes(encode_ppm(rgb))
    except OSError as e:
        raise PersistenceError(f"cannot write heatmap {path}: {e}") from e
    logger.debug(f"Heatmap written: {path} ({rgb.shape[1]}×{rgb.shape[0]})")


def export_heatmaps(values, out_dir: Union[str, Path], stem: str,
                    images: Optional[Sequence[np.ndarray]] = None) -> List[Path]:
    """Write `<stem>_<n>.ppm` for every sample of an N×H×W or N×1×H×W batch."""
    array = values.data if isinstance(values, Tensor) else np.asarray(values, dtype=np.float64)
    if array.ndim == 4:
        if array.shape[1] != 1:
            raise DimensionError(f"expected one channel per sample, got shape {array.shape}")
        array = array[:, 0]
    if array.ndim != 3:
        raise DimensionError(f"expected a batch of H×W maps, got shape {array.shape}")
    if images is not None and len(images) != len(array):
        raise ContractError(f"{len(array)} maps but {len(images)} images")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for n, sample in enumerate(array):
        path = out_dir / f"{stem}_{n}.ppm"
        export_heatmap(sample, path, None if images is None else images[n])
        paths.append(path)
    return paths


@dataclass
class Explanation:
    attention: np.ndarray               # H'×W' attention map
    mask: np.ndarray                    # H'×W' drop mask
    spatial: Optional[np.ndarray]       # H'×W' spatial attention, None without that stage


def explain(image: np.ndarray, params: ModelParams, config: Config) -> Explanation:
    """Maps the drop and attention branches see for one 3×H×W image."""
    with T.no_grad():
        featmap = backbone_forward(Tensor(image[None]), params, config)
        amap = attention_map(featmap, config.attention_pooling)
        mask = drop_mask(amap, config.alpha, "threshold" if config.drop_mode == "random_block" else config.drop_mode,
                         config.drop_quantile)
        spatial = None
        sp = params.spatial_attention()
        if sp is not None:
            gated = featmap
            cp = params.channel_attention()
            if cp is not None:
                _, gated = channel_attention(featmap, cp)
            ms, _ = spatial_attention(gated, sp)
            spatial = ms.data[0, 0]
    return Explanation(amap.values.data[0, 0], mask.values.data[0, 0], spatial)


def export_explanation(image: np.ndarray, params: ModelParams, config: Config,
                       out_dir: Union[str, Path], stem: str) -> Dict[str, Path]:
    """Write `<stem>_attention.ppm` (overlay), `<stem>_mask.ppm` and `<stem>_spatial.ppm`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ex = explain(image, params, config)
    written: Dict[str, Path] = {}
    outputs: Tuple[Tuple[str, Optional[np.ndarray], Optional[np.ndarray]], ...] = (
        ("attention", ex.attention, image),
        ("mask", ex.mask, None),
        ("spatial", ex.spatial, None),
    )
    for kind, values, overlay in outputs:
        if values is None:
            continue
        path = out_dir / f"{stem}_{kind}.ppm"
        export_heatmap(values, path, overlay)
        written[kind] = path
    return written
