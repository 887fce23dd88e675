import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import numpy as np

from .errors import ContractError
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Per-parameter moment buffers and step counts.

    `step` counts calls; `t` counts the updates each parameter has seen and
    drives its bias correction.
    """
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: Dict[str, int] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState, lr: float) -> Tuple[Mapping[str, Tensor], AdamState]:
    """One bias-corrected Adam update over the given parameters.

    Only the tensors passed in move; pass just those with a gradient from
    the last backward pass.

    Parameter arrays are replaced, never written in place, so activations
    saved on an old tape stay valid. Gradients are left for the caller to
    reset.
    """
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"no gradient for parameter(s): {', '.join(sorted(missing))}")

    state.step += 1

    for name, p in params.items():
        g = p.grad
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p.data), np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        t = state.t.get(name, 0) + 1
        state.m[name], state.v[name], state.t[name] = m, v, t
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)

    logger.debug(f"adam step {state.step}, lr {lr:.3e}, {len(params)} tensors")
    return params, state
