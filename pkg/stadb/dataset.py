"""
Datasets: synthetic identities, PPM ingestion and batches.

On disk every image is a binary P6 PPM named `<id>_c<cam>_<idx>.ppm`,
e.g. `0003_c1_07.ppm` is identity 3 seen by camera 1. In memory images
are 3×H×W float64 arrays scaled to [0, 1].
"""

import colorsys
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, IngestionError
from .tensor import Tensor

logger = logging.getLogger(__name__)

SPLITS = ("train", "query", "gallery")
FILENAME_RE = re.compile(r"^(-?\d+)_c(\d+)_(\d+)\.ppm$")
_GOLDEN = 0.6180339887498949


@dataclass
class Sample:
    image: np.ndarray          # 3×H×W in [0, 1]
    identity: int
    camera: int
    split: str = "train"
    path: Optional[str] = None


@dataclass
class DatasetIndex:
    samples: List[Sample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def identities(self) -> List[int]:
        return [s.identity for s in self.samples]

    @property
    def cameras(self) -> List[int]:
        return [s.camera for s in self.samples]

    def images(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        chosen = self.samples if indices is None else [self.samples[i] for i in indices]
        return np.stack([s.image for s in chosen])

    def by_split(self, split: str) -> "DatasetIndex":
        return DatasetIndex([s for s in self.samples if s.split == split])

    def class_map(self) -> Dict[int, int]:
        """Identity -> contiguous class index, in ascending identity order."""
        return {pid: k for k, pid in enumerate(sorted(set(self.identities)))}


@dataclass
class Batch:
    images: Tensor             # N×3×H×W
    labels: List[int]          # class indices in [0, K)
    cameras: List[int]
    indices: List[int]


def make_batch(index: DatasetIndex, indices: Sequence[int], class_map: Dict[int, int]) -> Batch:
    samples = [index.samples[i] for i in indices]
    return Batch(
        images=Tensor(index.images(indices)),
        labels=[class_map[s.identity] for s in samples],
        cameras=[s.camera for s in samples],
        indices=list(indices),
    )


# ==========================================
# Synthetic identities
# ==========================================

def _identity_params(identity: int, rng: np.random.Generator) -> np.ndarray:
    """(upper rgb, lower rgb, horizontal offset, waist shift).

    The upper-body hue walks the golden-ratio sequence, so no two
    identities share a parameter vector.
    """
    upper_hue = (identity * _GOLDEN) % 1.0
    lower_hue = (upper_hue + rng.uniform(0.25, 0.75)) % 1.0
    upper = colorsys.hsv_to_rgb(upper_hue, rng.uniform(0.6, 1.0), rng.uniform(0.6, 0.95))
    lower = colorsys.hsv_to_rgb(lower_hue, rng.uniform(0.3, 0.9), rng.uniform(0.2, 0.7))
    offset = rng.uniform(-0.12, 0.12)
    waist = rng.uniform(-0.06, 0.06)
    return np.array([*upper, *lower, offset, waist])


def _render(params: np.ndarray, tint: np.ndarray, height: int, width: int,
            rng: np.random.Generator) -> np.ndarray:
    upper, lower = params[0:3], params[3:6]
    offset, waist = params[6], params[7]

    img = np.empty((3, height, width))
    img[:] = rng.uniform(0.35, 0.55)

    jitter = rng.integers(-1, 2)
    cx = int(round(width * (0.5 + offset))) + int(jitter)
    half_torso = max(1, int(round(width * 0.22)))
    half_legs = max(1, int(round(width * 0.17)))
    half_head = max(1, int(round(width * 0.12)))

    def _rows(a: float, b: float):
        return slice(int(round(a * height)), max(int(round(a * height)) + 1, int(round(b * height))))

    def _cols(half: int):
        return slice(max(0, cx - half), min(width, cx + half))

    img[:, _rows(0.06, 0.2), _cols(half_head)] = np.array([0.86, 0.70, 0.58])[:, None, None]
    img[:, _rows(0.2, 0.5 + waist), _cols(half_torso)] = upper[:, None, None]
    img[:, _rows(0.5 + waist, 0.92), _cols(half_legs)] = lower[:, None, None]

    img = img * tint[:, None, None] * rng.uniform(0.9, 1.1)
    img = img + rng.normal(0.0, 0.03, img.shape)
    # auf 8 bit quantisieren, damit Speicher- und Plattenversion identisch sind
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def generate_synthetic_dataset(n_ids: int, per_id: int, n_cams: int, seed: int,
                               height: int = 64, width: int = 32,
                               split: bool = False) -> DatasetIndex:
    """Render `n_ids × per_id` images; cameras alternate 1..n_cams per instance.

    With `split`, the first half of the identities (rounded up) is `train`;
    each remaining identity sends its first per_id//2 instances to `query`
    and the rest to `gallery`.
    """
    if n_ids < 2 or per_id < 2 or n_cams < 2:
        raise ContractError(f"need n_ids, per_id, n_cams >= 2, got {n_ids}, {per_id}, {n_cams}")

    rng = np.random.default_rng(seed)
    params = [_identity_params(i, rng) for i in range(n_ids)]
    tints = rng.uniform(0.75, 1.25, (n_cams, 3))
    n_train = (n_ids + 1) // 2

    samples: List[Sample] = []
    for identity in range(n_ids):
        for instance in range(per_id):
            camera = instance % n_cams + 1
            image = _render(params[identity], tints[camera - 1], height, width, rng)
            if not split or identity < n_train:
                tag = "train"
            else:
                tag = "query" if instance < per_id // 2 else "gallery"
            samples.append(Sample(image, identity, camera, tag,
                                  path=f"{identity:04d}_c{camera}_{instance:02d}.ppm"))

    logger.info(f"Synthesised {len(samples)} images ({n_ids} ids × {per_id}, {n_cams} cameras, seed {seed})")
    return DatasetIndex(samples)


# ==========================================
# PPM P6
# ==========================================

def encode_ppm(rgb: np.ndarray) -> bytes:
    """H×W×3 uint8 -> binary P6 bytes."""
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def write_ppm(path: Union[str, Path], rgb: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(rgb))


def to_rgb8(image: np.ndarray) -> np.ndarray:
    """3×H×W float in [0, 1] -> H×W×3 uint8."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def decode_ppm(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    """Binary P6 with maxval 255 -> H×W×3 uint8."""
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise IngestionError("truncated PPM header", path=source)
        tokens.append(raw[start:pos])

    if tokens[0] != b"P6":
        raise IngestionError(f"not a binary P6 image (magic {tokens[0][:8]!r})", path=source)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise IngestionError("malformed PPM header", path=source) from None
    if width < 1 or height < 1 or maxval != 255:
        raise IngestionError(f"unsupported PPM geometry {width}x{height}, maxval {maxval}", path=source)

    pos += 1  # single whitespace after maxval
    expected = width * height * 3
    pixels = raw[pos:pos + expected]
    if len(pixels) != expected:
        raise IngestionError(f"expected {expected} pixel bytes, found {len(pixels)}", path=source)
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)


def read_ppm(path: Union[str, Path]) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IngestionError(f"cannot read: {e}", path=str(path)) from e
    return decode_ppm(raw, source=str(path))


def parse_filename(name: str):
    match = FILENAME_RE.match(name)
    if not match:
        raise IngestionError("file name does not match <id>_c<cam>_<idx>.ppm", path=name)
    identity, camera, instance = (int(g) for g in match.groups())
    return identity, camera, instance


def image_from_file(path: Union[str, Path], height: int, width: int) -> np.ndarray:
    rgb = read_ppm(path)
    if rgb.shape[:2] != (height, width):
        raise IngestionError(f"image is {rgb.shape[0]}×{rgb.shape[1]}, expected {height}×{width}", path=str(path))
    return rgb.transpose(2, 0, 1).astype(np.float64) / 255.0


def load_dataset(directory: Union[str, Path], height: int = 64, width: int = 32,
                 split: str = "train", workers: int = 4) -> DatasetIndex:
    directory = Path(directory)
    if not directory.is_dir():
        raise IngestionError("not a directory", path=str(directory))
    files = sorted(p for p in directory.iterdir() if p.suffix == ".ppm")
    if not files:
        raise IngestionError("no .ppm images found", path=str(directory))
    parsed = [(p, parse_filename(p.name)) for p in files]

    def _load(entry):
        path, (identity, camera, _) = entry
        return Sample(image_from_file(path, height, width), identity, camera, split, str(path))

    # map() liefert in Eingabereihenfolge, unabhängig von der Thread-Anzahl
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        samples = list(pool.map(_load, parsed))

    logger.info(f"Loaded {len(samples)} images ({len(set(s.identity for s in samples))} ids) from {directory}")
    return DatasetIndex(samples)


def write_dataset(index: DatasetIndex, out_dir: Union[str, Path]) -> Dict[str, int]:
    """Write each sample to `<out_dir>/<split>/<name>`; returns counts per split."""
    out_dir = Path(out_dir)
    counts: Dict[str, int] = {}
    for sample in index.samples:
        target = out_dir / sample.split
        target.mkdir(parents=True, exist_ok=True)
        name = Path(sample.path).name if sample.path else f"{sample.identity:04d}_c{sample.camera}_{counts.get(sample.split, 0):02d}.ppm"
        write_ppm(target / name, to_rgb8(sample.image))
        counts[sample.split] = counts.get(sample.split, 0) + 1
    logger.info(f"Wrote dataset to {out_dir}: {counts}")
    return counts
