"""
Finite-difference gradient suite.

Every differentiable op is checked on fresh random instances; outputs are
reduced to a scalar with random weights so each input element carries an
O(1) gradient. The full train_forward is checked along a random direction
in parameter space with the branch draw pinned per instance.
"""

import logging
import time
from collections import OrderedDict
from typing import Callable, Dict, List, Tuple

import numpy as np
from pydantic import BaseModel

from . import tensor as T
from .attention import ChannelAttentionParams, SpatialAttentionParams, cbam, channel_attention, spatial_attention
from .config import Config
from .dataset import Batch
from .errors import GradcheckFailure
from .losses import batch_hard, cross_entropy, pairwise_distances, soft_margin_triplet
from .net import ModelParams, init_params, train_forward
from .tensor import Tensor

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
EPS = 1e-5


class CheckResult(BaseModel):
    name: str
    instances: int
    max_error: float


class GradcheckReport(BaseModel):
    tolerance: float
    eps: float
    checks: List[CheckResult]
    seconds: float

    @property
    def max_error(self) -> float:
        return max((c.max_error for c in self.checks), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def failures(self) -> List[CheckResult]:
        return [c for c in self.checks if c.max_error >= self.tolerance]

    def require_pass(self) -> None:
        if not self.passed:
            names = ", ".join(c.name for c in self.failures())
            raise GradcheckFailure(f"max relative error {self.max_error:.3e} >= {self.tolerance:g} in: {names}")


Case = Tuple[Callable[[Tensor], Tensor], Tensor]


def _weighted(fn: Callable[[Tensor], Tensor], shape, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    weights = Tensor(rng.normal(size=shape))
    return lambda x: T.sum_all(T.mul(fn(x), weights))


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    """Values with |x| in [0.1, 1.5] so relu/max kinks stay out of reach."""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.5, size=shape)


# ==========================================
# Cases (each returns the function and the probed input)
# ==========================================

def _conv_input(rng) -> Case:
    stride = int(rng.integers(1, 3))
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    b = Tensor(rng.normal(size=3))
    x = Tensor(rng.normal(size=(2, 2, 5, 5)))
    out_shape = T.conv2d(x, w, b, stride=stride, padding=1).shape
    return _weighted(lambda t: T.conv2d(t, w, b, stride=stride, padding=1), out_shape, rng), x


def _conv_weight(rng) -> Case:
    x = Tensor(rng.normal(size=(2, 2, 5, 4)))
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    out_shape = T.conv2d(x, w, padding=1).shape
    return _weighted(lambda t: T.conv2d(x, t, padding=1), out_shape, rng), w


def _linear_input(rng) -> Case:
    w = Tensor(rng.normal(size=(4, 5)))
    b = Tensor(rng.normal(size=4))
    return _weighted(lambda t: T.linear(t, w, b), (3, 4), rng), Tensor(rng.normal(size=(3, 5)))


def _linear_weight(rng) -> Case:
    x = Tensor(rng.normal(size=(3, 5)))
    return _weighted(lambda t: T.linear(x, t), (3, 4), rng), Tensor(rng.normal(size=(4, 5)))


def _elementwise(fn: Callable[[Tensor], Tensor]):
    def case(rng) -> Case:
        x = Tensor(_away_from_zero(rng, (3, 4)))
        return _weighted(fn, (3, 4), rng), x
    return case


def _softmax(rng) -> Case:
    return _weighted(T.softmax_rows, (3, 5), rng), Tensor(rng.normal(size=(3, 5)))


def _log_softmax(rng) -> Case:
    return _weighted(T.log_softmax_rows, (3, 5), rng), Tensor(rng.normal(size=(3, 5)))


def _pool(kind: str):
    def case(rng) -> Case:
        x = Tensor(rng.normal(size=(2, 3, 4, 3)))
        return _weighted(lambda t: T.pool(t, kind), T.pool(x, kind).shape, rng), x
    return case


def _broadcast_mul(gate_kind: str):
    def case(rng) -> Case:
        x = Tensor(rng.normal(size=(2, 3, 4, 3)))
        gate_shape = (2, 3, 1, 1) if gate_kind == "channel" else (2, 1, 4, 3)
        gate = Tensor(rng.normal(size=gate_shape))
        return _weighted(lambda t: T.broadcast_mul(t, gate), x.shape, rng), x
    return case


def _channel_attention(rng) -> Case:
    params = ChannelAttentionParams.init(8, 2, rng)
    x = Tensor(rng.normal(size=(2, 8, 3, 3)))
    return _weighted(lambda t: channel_attention(t, params)[1], x.shape, rng), x


def _spatial_attention(merge: str):
    def case(rng) -> Case:
        params = SpatialAttentionParams.init(3, rng, merge=merge)
        x = Tensor(rng.normal(size=(2, 3, 4, 3)))
        return _weighted(lambda t: spatial_attention(t, params)[1], x.shape, rng), x
    return case


def _cbam_kernel(rng) -> Case:
    cp = ChannelAttentionParams.init(4, 2, rng)
    x = Tensor(rng.normal(size=(2, 4, 4, 3)))
    kernel = Tensor(rng.normal(size=(1, 1, 3, 3)))
    def fn(k: Tensor) -> Tensor:
        return cbam(x, cp, SpatialAttentionParams(k))
    return _weighted(fn, x.shape, rng), kernel


def _cross_entropy(rng) -> Case:
    labels = rng.integers(0, 4, size=5)
    return (lambda t: cross_entropy(t, labels)), Tensor(rng.normal(size=(5, 4)))


def _triplet(rng) -> Case:
    labels = np.repeat(np.arange(3), 2)
    emb = Tensor(rng.normal(size=(6, 4)))

    def fn(t: Tensor) -> Tensor:
        pairs = batch_hard(pairwise_distances(t), labels)
        return soft_margin_triplet(pairs.hp, pairs.hn)
    return fn, emb


OP_CASES: Dict[str, Callable[[np.random.Generator], Case]] = OrderedDict([
    ("conv2d.input", _conv_input),
    ("conv2d.weight", _conv_weight),
    ("linear.input", _linear_input),
    ("linear.weight", _linear_weight),
    ("sigmoid", _elementwise(T.sigmoid)),
    ("relu", _elementwise(T.relu)),
    ("softplus", _elementwise(T.softplus)),
    ("softmax_rows", _softmax),
    ("log_softmax_rows", _log_softmax),
    ("pool.gap", _pool("gap")),
    ("pool.gmp", _pool("gmp")),
    ("pool.channel_avg", _pool("channel_avg")),
    ("pool.channel_max", _pool("channel_max")),
    ("broadcast_mul.channel", _broadcast_mul("channel")),
    ("broadcast_mul.spatial", _broadcast_mul("spatial")),
    ("channel_attention", _channel_attention),
    ("spatial_attention.shared_sum", _spatial_attention("shared_sum")),
    ("spatial_attention.concat", _spatial_attention("concat")),
    ("cbam.kernel", _cbam_kernel),
    ("cross_entropy", _cross_entropy),
    ("batch_hard_triplet", _triplet),
])


# ==========================================
# Full model
# ==========================================

def tiny_config(**overrides) -> Config:
    values = dict(image_height=16, image_width=8, backbone_channels=(4, 8), backbone_strides=(2, 1),
                  d1=8, d2=6, p=2, n_per=2, reduction=2, spatial_kernel=3)
    values.update(overrides)
    return Config(**values)


def _shifted(base: Dict[str, np.ndarray], direction: Dict[str, np.ndarray], t: float) -> ModelParams:
    return ModelParams(OrderedDict(
        (name, Tensor(value + t * direction[name], requires_grad=True, name=name))
        for name, value in base.items()
    ))


def train_forward_directional_error(rng: np.random.Generator, rho: float, eps: float = EPS) -> float:
    """Relative error of d/dt loss(params + t·d) at t = 0 against a central difference."""
    config = tiny_config(rho=rho)
    params = init_params(config, 2, seed=int(rng.integers(0, 2 ** 31)))
    images = rng.uniform(0.0, 1.0, size=(4, 3, config.image_height, config.image_width))
    batch = Batch(Tensor(images), [0, 0, 1, 1], [1, 2, 1, 2], [0, 1, 2, 3])
    base = {name: t.data.copy() for name, t in params.items()}
    direction = {name: rng.normal(size=value.shape) for name, value in base.items()}
    branch_seed = int(rng.integers(0, 2 ** 31))

    def loss_at(p: ModelParams) -> Tensor:
        return train_forward(batch, p, config, np.random.default_rng(branch_seed)).loss

    probe = _shifted(base, direction, 0.0)
    T.backward(loss_at(probe))
    analytic = float(sum(np.sum(t.grad * direction[name]) for name, t in probe.items() if t.grad is not None))
    with T.no_grad():
        plus = loss_at(_shifted(base, direction, eps)).item()
        minus = loss_at(_shifted(base, direction, -eps)).item()
    numeric = (plus - minus) / (2.0 * eps)
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def run_suite(instances: int = 10, seed: int = 0, eps: float = EPS, tolerance: float = TOLERANCE) -> GradcheckReport:
    started = time.perf_counter()
    rng = np.random.default_rng(seed)
    checks: List[CheckResult] = []

    for name, make_case in OP_CASES.items():
        worst = 0.0
        for _ in range(instances):
            fn, x = make_case(rng)
            worst = max(worst, T.grad_check(fn, x, eps))
        checks.append(CheckResult(name=name, instances=instances, max_error=worst))
        logger.debug(f"{name}: max relative error {worst:.3e}")

    # alternate the pinned branch: rho 0 always attention, rho 1 always drop
    worst = max(train_forward_directional_error(rng, rho=float(i % 2), eps=eps) for i in range(instances))
    checks.append(CheckResult(name="train_forward", instances=instances, max_error=worst))

    report = GradcheckReport(tolerance=tolerance, eps=eps, checks=checks, seconds=time.perf_counter() - started)
    logger.info(f"Gradient suite: {len(checks)} checks, max relative error {report.max_error:.3e} "
                f"in {report.seconds:.1f}s")
    return report
