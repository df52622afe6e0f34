"""Reverse-mode automatic differentiation over dense float64 tensors.

A `Tensor` wraps a numpy array and records the operation that produced it;
`backward` replays the recorded graph in reverse topological order. The tape
is dynamic: every op call appends to the graph as it executes. All values are
64-bit floats so gradients can be validated against central finite
differences at tight tolerances.

NaN/Inf values raise `NonFiniteError` (tagged with the op name) the moment
they appear at an operation boundary instead of propagating silently.

FLOP accounting convention: a multiply-add counts as 2 FLOPs and only matrix
multiplications are counted (vector adds, normalizations and softmaxes are
ignored). `count_flops()` activates a thread-local counter used to
cross-check the analytic cost model.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .errors import DimensionError, GraphError, NonFiniteError, TrainingError

__all__ = [
    "Tensor",
    "as_tensor",
    "matmul",
    "transpose",
    "narrow",
    "add",
    "mul",
    "relu",
    "layer_norm",
    "softmax",
    "log_softmax",
    "mean",
    "reduce_sum",
    "cross_entropy",
    "backward",
    "zero_grads",
    "adam_step",
    "Adam",
    "AdamState",
    "count_flops",
    "FlopCounter",
]


def _ensure_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by op '{op}'")


class Tensor:
    """Dense n-dimensional float64 value with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "_op", "_done")

    def __init__(self, data, requires_grad: bool = False, _prev=(), _op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        _ensure_finite(arr, _op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._prev = _prev
        self._op = _op
        self._done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Plain-data copy with no recorded history and no gradient."""
        return Tensor(self.data.copy(), requires_grad=False)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    # light operator sugar; every op is also available as a module function
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ---------------------------------------------------------------------------
# FLOP accounting


class FlopCounter:
    """Accumulates FLOPs of counted ops executed while active."""

    def __init__(self):
        self.flops = 0

    def add(self, n: int) -> None:
        self.flops += n


_ACTIVE = threading.local()


@contextmanager
def count_flops():
    """Activate a FLOP counter for ops executed on this thread."""
    counter = FlopCounter()
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = _ACTIVE.stack = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()


def _count(n: int) -> None:
    stack = getattr(_ACTIVE, "stack", None)
    if stack:
        for counter in stack:
            counter.add(n)


# ---------------------------------------------------------------------------
# ops


def _make(data, inputs, op, backward_fn) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    if not requires:
        return Tensor(data, _op=op)
    out = Tensor(data, requires_grad=True, _prev=tuple(inputs), _op=op)
    out._backward = backward_fn(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def matmul(a, b) -> Tensor:
    """Matrix product of two rank-2 tensors; counts 2*m*k*n FLOPs."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    _count(2 * m * k * n)
    data = a.data @ b.data
    _ensure_finite(data, "matmul")

    def backward_fn(out):
        def run():
            if a.requires_grad:
                a._accum(out.grad @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ out.grad)

        return run

    return _make(data, (a, b), "matmul", backward_fn)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a rank-2 tensor, got shape {x.shape}")
    data = x.data.T.copy()

    def backward_fn(out):
        def run():
            x._accum(out.grad.T)

        return run

    return _make(data, (x,), "transpose", backward_fn)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along `axis`; gradient scatters back into place."""
    x = as_tensor(x)
    if axis not in (0, 1) or x.data.ndim != 2:
        raise DimensionError("narrow supports axis 0 or 1 of a rank-2 tensor")
    if start < 0 or start + length > x.shape[axis]:
        raise DimensionError(
            f"narrow range [{start}, {start + length}) exceeds axis {axis} of shape {x.shape}"
        )
    index = (slice(start, start + length), slice(None)) if axis == 0 else (slice(None), slice(start, start + length))
    data = x.data[index].copy()

    def backward_fn(out):
        def run():
            g = np.zeros_like(x.data)
            g[index] = out.grad
            x._accum(g)

        return run

    return _make(data, (x,), "narrow", backward_fn)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add shapes not broadcastable: {a.shape} + {b.shape}") from exc
    _ensure_finite(data, "add")

    def backward_fn(out):
        def run():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad, b.shape))

        return run

    return _make(data, (a, b), "add", backward_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul shapes not broadcastable: {a.shape} * {b.shape}") from exc
    _ensure_finite(data, "mul")

    def backward_fn(out):
        def run():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad * a.data, b.shape))

        return run

    return _make(data, (a, b), "mul", backward_fn)


def relu(x) -> Tensor:
    x = as_tensor(x)
    data = np.maximum(x.data, 0.0)

    def backward_fn(out):
        def run():
            x._accum(out.grad * (x.data > 0.0))

        return run

    return _make(data, (x,), "relu", backward_fn)


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    x = as_tensor(x)
    if eps <= 0:
        raise DimensionError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    data = (x.data - mu) * inv
    _ensure_finite(data, "layer_norm")
    y = data

    def backward_fn(out):
        def run():
            g = out.grad
            gm = g.mean(axis=-1, keepdims=True)
            gym = (g * y).mean(axis=-1, keepdims=True)
            x._accum(inv * (g - gm - y * gym))

        return run

    return _make(data, (x,), "layer_norm", backward_fn)


def _check_axis(x: Tensor, axis: int, op: str) -> int:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise DimensionError(f"{op} axis {axis} out of range for shape {x.shape}")
    return axis % x.data.ndim


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(x, axis, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)
    y = data

    def backward_fn(out):
        def run():
            g = out.grad
            x._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)))

        return run

    return _make(data, (x,), "softmax", backward_fn)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(x, axis, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    _ensure_finite(data, "log_softmax")
    p = np.exp(data)

    def backward_fn(out):
        def run():
            g = out.grad
            x._accum(g - p * g.sum(axis=axis, keepdims=True))

        return run

    return _make(data, (x,), "log_softmax", backward_fn)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    if axis is not None:
        axis = _check_axis(x, axis, "mean")
        n = x.shape[axis]
    else:
        n = x.size
    data = x.data.mean(axis=axis)

    def backward_fn(out):
        def run():
            g = out.grad / n
            if axis is None:
                x._accum(np.full_like(x.data, g))
            else:
                x._accum(np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

        return run

    return _make(data, (x,), "mean", backward_fn)


def reduce_sum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    if axis is not None:
        axis = _check_axis(x, axis, "sum")
    data = x.data.sum(axis=axis)

    def backward_fn(out):
        def run():
            if axis is None:
                x._accum(np.full_like(x.data, out.grad))
            else:
                x._accum(np.broadcast_to(np.expand_dims(out.grad, axis), x.shape).copy())

        return run

    return _make(data, (x,), "sum", backward_fn)


def cross_entropy(logits, target_dist) -> Tensor:
    """Mean weighted cross-entropy: -(1/n) sum_i sum_c t[i,c] log softmax(logits)[i,c].

    Target rows must be nonnegative but need not sum to one, so per-row
    weights (e.g. a down-weighted background class) fold into the target.
    """
    logits, target_dist = as_tensor(logits), as_tensor(target_dist)
    if logits.data.ndim != 2 or target_dist.data.ndim != 2:
        raise DimensionError("cross_entropy expects rank-2 logits and targets")
    if logits.shape != target_dist.shape:
        raise DimensionError(
            f"cross_entropy shape mismatch: logits {logits.shape} vs targets {target_dist.shape}"
        )
    if np.any(target_dist.data < 0):
        raise DimensionError("cross_entropy target rows must be nonnegative")
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    data = -(target_dist.data * logp).sum() / n
    _ensure_finite(np.asarray(data), "cross_entropy")
    p = np.exp(logp)

    def backward_fn(out):
        def run():
            g = out.grad / n
            if logits.requires_grad:
                row_mass = target_dist.data.sum(axis=1, keepdims=True)
                logits._accum(g * (p * row_mass - target_dist.data))
            if target_dist.requires_grad:
                target_dist._accum(-g * logp)

        return run

    return _make(data, (logits, target_dist), "cross_entropy", backward_fn)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Populate `.grad` of every requires_grad tensor reachable from `loss`."""
    if loss.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._done:
        raise GraphError("backward already ran for this loss; rebuild the graph first")
    loss._done = True

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()


def zero_grads(params) -> None:
    """Clear gradients on a dict or iterable of tensors."""
    values = params.values() if isinstance(params, dict) else params
    for t in values:
        t.grad = None


# ---------------------------------------------------------------------------
# Adam


class AdamState:
    """First/second moment estimates plus the shared step count."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on `params` and `state`."""
    state.t += 1
    t = state.t
    for name in sorted(params):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter '{name}'")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over a named dict of parameter tensors."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState({k: t.data for k, t in params.items()})

    def step(self) -> None:
        datas = {k: t.data for k, t in self.params.items()}
        grads = {}
        for name, t in self.params.items():
            if t.grad is None:
                grads[name] = np.zeros_like(t.data)
            else:
                grads[name] = t.grad
        adam_step(datas, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        zero_grads(self.params)
