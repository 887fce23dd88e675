"""
Dense float64 tensors with a reverse-mode tape.

Every differentiable operation returns a new Tensor and, when any input
requires a gradient, records a TapeNode holding its inputs and a backward
closure over the activations it saved. `backward(loss)` walks the tape
once in reverse topological order and accumulates into the `grad` of
every leaf that requires it. Forward activations are never mutated.
"""

import contextlib
import logging
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()


def _grad_enabled() -> bool:
    return not getattr(_state, "no_grad", False)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording for the current thread."""
    previous = getattr(_state, "no_grad", False)
    _state.no_grad = True
    try:
        yield
    finally:
        _state.no_grad = previous


@dataclass(frozen=True)
class TapeNode:
    op: str
    inputs: Tuple["Tensor", ...]
    backward: BackwardFn


class Tensor:
    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[TapeNode] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.requires_grad = False
        out.grad = None
        out.name = ""
        out._node = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def record(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward_fn: BackwardFn) -> Tensor:
    """Wrap an op result and put it on the tape if any input needs a gradient.

    `backward_fn` maps the upstream gradient to one gradient (or None) per
    input, in input order.
    """
    out = Tensor._wrap(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = TapeNode(op, tuple(inputs), backward_fn)
    return out


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor._node is not None:
            for parent in tensor._node.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate `grad` on every requires_grad leaf reachable from `loss`.

    Gradients accumulate across calls until reset with `zero_grad`.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires a gradient")

    pending = {id(loss): np.ones_like(loss.data)}
    for tensor in reversed(_topological_order(loss)):
        upstream = pending.pop(id(tensor), None)
        if upstream is None:
            continue
        if tensor._node is None:
            tensor.grad = upstream.copy() if tensor.grad is None else tensor.grad + upstream
            continue
        for parent, grad in zip(tensor._node.inputs, tensor._node.backward(upstream)):
            if grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = grad if key not in pending else pending[key] + grad


def zero_grad(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ==========================================
# Elementwise arithmetic
# ==========================================

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast") from e


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(a.data + b.data, (a, b), "add", _backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record(a.data - b.data, (a, b), "sub", _backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    a_data, b_data = a.data, b.data

    def _backward(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return record(a_data * b_data, (a, b), "mul", _backward)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def _backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return record(np.array(x.data.sum()), (x,), "sum", _backward)


def mean(x: Tensor) -> Tensor:
    shape, count = x.shape, x.size

    def _backward(g):
        return (np.full(shape, float(g) / count),)

    return record(np.array(x.data.mean()), (x,), "mean", _backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise DimensionError(f"cannot reshape {original} to {tuple(shape)}") from e

    def _backward(g):
        return (g.reshape(original),)

    return record(data.copy(), (x,), "reshape", _backward)


def flatten(x: Tensor) -> Tensor:
    """N×... -> N×(rest)."""
    return reshape(x, (x.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(data, tensors, "concat", _backward)


def take(x: Tensor, rows: Sequence[int], cols: Sequence[int]) -> Tensor:
    """Gather x[rows[i], cols[i]] from a rank-2 tensor into a vector."""
    if x.ndim != 2:
        raise DimensionError(f"take needs a rank-2 tensor, got {x.shape}")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    shape = x.shape

    def _backward(g):
        grad = np.zeros(shape)
        np.add.at(grad, (rows, cols), g)
        return (grad,)

    return record(x.data[rows, cols].copy(), (x,), "take", _backward)


# ==========================================
# Layers
# ==========================================

def conv2d(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, N×C_in×H×W * C_out×C_in×kh×kw -> N×C_out×H'×W'."""
    x, w = input.data, weight.data
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d needs rank-4 input and weight, got {x.shape} and {w.shape}")
    n, c_in, h, wd = x.shape
    c_out, c_w, kh, kw = w.shape
    if c_w != c_in:
        raise DimensionError(f"input has {c_in} channels but weight expects {c_w}")
    if stride < 1 or padding < 0:
        raise ContractError(f"invalid stride={stride} or padding={padding}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise DimensionError(f"kernel {kh}×{kw} larger than padded input {h}×{wd} (padding {padding})")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"bias shape {bias.shape} does not match {c_out} output channels")

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (wd + 2 * padding - kw) // stride + 1

    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :h_out, :w_out]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, h_out, w_out, c_in * kh * kw)
    w_mat = w.reshape(c_out, -1)
    out = (cols @ w_mat.T).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def _backward(g):
        g_rows = g.transpose(0, 2, 3, 1)
        grad_w = np.tensordot(g_rows, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(w.shape)
        grad_cols = (g_rows @ w_mat).reshape(n, h_out, w_out, c_in, kh, kw)
        grad_xp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                grad_xp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += \
                    grad_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        grad_x = grad_xp[:, :, padding:padding + h, padding:padding + wd]
        grads = [grad_x, grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (input, weight) if bias is None else (input, weight, bias)
    return record(np.ascontiguousarray(out), inputs, "conv2d", _backward)


def linear(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """out[n, j] = sum_i weight[j, i] * input[n, i] + bias[j]."""
    x, w = input.data, weight.data
    if x.ndim != 2 or w.ndim != 2:
        raise DimensionError(f"linear needs rank-2 input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"input width {x.shape[1]} does not match weight width {w.shape[1]}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} does not match {w.shape[0]} outputs")

    out = x @ w.T
    if bias is not None:
        out = out + bias.data

    def _backward(g):
        grads = [g @ w, g.T @ x]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = (input, weight) if bias is None else (input, weight, bias)
    return record(out, inputs, "linear", _backward)


# ==========================================
# Activations
# ==========================================

def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)

    def _backward(g):
        return (g * s * (1.0 - s),)

    return record(s, (x,), "sigmoid", _backward)


def relu(x: Tensor) -> Tensor:
    active = x.data > 0

    def _backward(g):
        return (g * active,)

    return record(np.where(active, x.data, 0.0), (x,), "relu", _backward)


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows needs a rank-2 tensor, got {x.shape}")
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def _backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return record(s, (x,), "softmax_rows", _backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"log_softmax_rows needs a rank-2 tensor, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def _backward(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return record(out, (x,), "log_softmax_rows", _backward)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) as max(x, 0) + log1p(exp(-|x|))."""
    data = x.data
    out = np.maximum(data, 0.0) + np.log1p(np.exp(-np.abs(data)))

    def _backward(g):
        return (g * _stable_sigmoid(data),)

    return record(out, (x,), "softplus", _backward)


ACTIVATIONS = {
    "sigmoid": sigmoid,
    "relu": relu,
    "softmax_rows": softmax_rows,
}


def activation(input: Tensor, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ContractError(f"unknown activation {kind!r}") from None
    return fn(input)


# ==========================================
# Pooling and broadcasting
# ==========================================

def _spatial_argmax(x: np.ndarray, axis: int) -> Tuple[np.ndarray, np.ndarray]:
    idx = np.expand_dims(np.argmax(x, axis=axis), axis)
    return idx, np.take_along_axis(x, idx, axis=axis)


def pool(input: Tensor, kind: str) -> Tensor:
    """gap/gmp reduce H×W to N×C×1×1; channel_avg/channel_max reduce C to N×1×H×W.

    Max variants route the gradient to the first maximal element in
    row-major order.
    """
    x = input.data
    if x.ndim != 4:
        raise DimensionError(f"pool needs a rank-4 tensor, got {x.shape}")
    n, c, h, w = x.shape

    if kind == "gap":
        def _backward(g):
            return (np.broadcast_to(g / (h * w), x.shape).copy(),)
        return record(x.mean(axis=(2, 3), keepdims=True), (input,), "gap", _backward)

    if kind == "channel_avg":
        def _backward(g):
            return (np.broadcast_to(g / c, x.shape).copy(),)
        return record(x.mean(axis=1, keepdims=True), (input,), "channel_avg", _backward)

    if kind == "gmp":
        flat = x.reshape(n, c, h * w)
        idx, out = _spatial_argmax(flat, axis=2)

        def _backward(g):
            grad = np.zeros_like(flat)
            np.put_along_axis(grad, idx, g.reshape(n, c, 1), axis=2)
            return (grad.reshape(x.shape),)
        return record(out.reshape(n, c, 1, 1), (input,), "gmp", _backward)

    if kind == "channel_max":
        idx, out = _spatial_argmax(x, axis=1)

        def _backward(g):
            grad = np.zeros_like(x)
            np.put_along_axis(grad, idx, g, axis=1)
            return (grad,)
        return record(out, (input,), "channel_max", _backward)

    raise ContractError(f"unknown pooling {kind!r}")


def broadcast_mul(feature: Tensor, gate: Tensor) -> Tensor:
    """Multiply N×C×H×W by a N×C×1×1 channel map or a N×1×H×W spatial map."""
    f, m = feature.data, gate.data
    if f.ndim != 4 or m.ndim != 4:
        raise DimensionError(f"broadcast_mul needs rank-4 tensors, got {f.shape} and {m.shape}")
    n, c, h, w = f.shape
    if m.shape == (n, c, 1, 1):
        reduce_axes: Tuple[int, ...] = (2, 3)
    elif m.shape == (n, 1, h, w):
        reduce_axes = (1,)
    else:
        raise DimensionError(f"gate shape {m.shape} fits neither {(n, c, 1, 1)} nor {(n, 1, h, w)}")

    def _backward(g):
        return g * m, (g * f).sum(axis=reduce_axes, keepdims=True)

    return record(f * m, (feature, gate), "broadcast_mul", _backward)


# ==========================================
# Verification
# ==========================================

def grad_check(fn: Callable[[Tensor], Tensor], input: Tensor, eps: float = 1e-5) -> float:
    """Max over elements of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).

    The numeric side uses central differences with step `eps`.
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    probe = Tensor(input.data, requires_grad=True)
    out = as_tensor(fn(probe))
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")

    analytic = np.zeros_like(probe.data)
    if out.requires_grad:
        backward(out)
        if probe.grad is not None:
            analytic = probe.grad

    base = probe.data
    numeric = np.zeros_like(base)
    with no_grad():
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += eps
            minus[idx] -= eps
            f_plus = as_tensor(fn(Tensor(plus))).item()
            f_minus = as_tensor(fn(Tensor(minus))).item()
            numeric[idx] = (f_plus - f_minus) / (2.0 * eps)

    if base.size == 0:
        return 0.0
    error = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    worst = float(error.max())
    logger.debug(f"grad_check: {base.size} elements, max relative error {worst:.3e}")
    return worst
