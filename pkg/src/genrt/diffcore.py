"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable quantity in the package is a :class:`Tensor`.  Ops record
their parents and a closure mapping the upstream gradient to one gradient per
parent; :meth:`Tensor.backward` walks the graph in reverse topological order.
Broadcasting follows numpy, with gradients summed back onto the original shape.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_EPS = 1e-12

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (thread-local)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to the Tensor operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return detach(self)

    # operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # reverse pass -----------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(node) into ``node.grad`` for every graph node.

        Gradients add to whatever is already stored, so two calls without an
        intervening ``zero_grad`` sum.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        upstream: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = upstream.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in upstream:
                    upstream[key] = upstream[key] + pg
                else:
                    upstream[key] = pg


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


# ----------------------------------------------------------------------
# graph helpers


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def detach(x: Tensor) -> Tensor:
    """Same values, no upstream path.  The array is shared, not copied."""
    x = as_tensor(x)
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.grad = None
    out.name = None
    out.op = "detach"
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    return out


# ----------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), back, "div")


def where(mask, a, b) -> Tensor:
    """Select ``a`` where ``mask`` holds, else ``b``; mask is not differentiated."""
    mask = np.asarray(mask, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = np.where(mask, a.data, b.data)
    except ValueError:
        raise ShapeError(f"where: incompatible shapes {mask.shape}, {a.shape}, {b.shape}") from None
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(np.where(mask, g, 0.0), sa), _unbroadcast(np.where(mask, 0.0, g), sb)

    return _make(out, (a, b), back, "where")


# ----------------------------------------------------------------------
# elementwise unary


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    # np.maximum propagates NaN, so non-finite activations surface in the loss
    return _make(np.maximum(x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,), "exp")


def log(x) -> Tensor:
    """Natural log with inputs clamped to ``LOG_EPS`` (value and gradient)."""
    x = as_tensor(x)
    xc = np.maximum(x.data, LOG_EPS)
    return _make(np.log(xc), (x,), lambda g: (g / xc,), "log")


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    r = np.sqrt(x.data)
    return _make(r, (x,), lambda g: (0.5 * g / r,), "sqrt")


def abs_(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    out = np.logaddexp(0.0, xd)
    sig = 0.5 * (1.0 + np.tanh(0.5 * xd))
    return _make(out, (x,), lambda g: (g * sig,), "softplus")


# ----------------------------------------------------------------------
# row-wise (last axis) normalizers


def logsumexp_rows(x) -> Tensor:
    """log(sum(exp(x))) over the last axis; output drops that axis."""
    x = as_tensor(x)
    m = np.max(x.data, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(x.data - m), axis=-1, keepdims=True)
    lse = np.log(s) + m
    soft = np.exp(x.data - lse)
    return _make(lse[..., 0], (x,), lambda g: (g[..., None] * soft,), "logsumexp_rows")


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _make(p, (x,), back, "softmax_rows")


def log_softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * np.sum(g, axis=-1, keepdims=True),)

    return _make(out, (x,), back, "log_softmax_rows")


# ----------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    axes = _norm_axis(axis, x.ndim)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), back, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    shape = x.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(np.mean(x.data, axis=axes, keepdims=keepdims), (x,), back, "mean")


def cumsum(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)

    def back(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(np.cumsum(x.data, axis=axis), (x,), back, "cumsum")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, ts, back, "concat")


def slice_(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    try:
        out = x.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} (shape {shape})") from None

    basic = _is_basic_index(index)

    def back(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (x,), back, "slice")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {x.shape}")
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {orig} as {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(orig),), "reshape")


def take_last(x, index) -> Tensor:
    """``x[..., index[...]]``: pick one entry of the last axis per leading position."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    if index.shape != x.shape[:-1]:
        raise ShapeError(f"take_last: index shape {index.shape} does not match {x.shape[:-1]}")
    out = np.take_along_axis(x.data, index[..., None], axis=-1)[..., 0]
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        np.put_along_axis(full, index[..., None], g[..., None], axis=-1)
        return (full,)

    return _make(out, (x,), back, "take_last")


OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softmax_rows": softmax_rows,
    "log_softmax_rows": log_softmax_rows,
    "sum": sum_,
    "mean": mean,
    "logsumexp_rows": logsumexp_rows,
    "concat": lambda *ts: concat(ts, axis=-1),
    "slice": slice_,
    "exp": exp,
    "log": log,
    "square": square,
    "sqrt": sqrt,
    "abs": abs_,
    "softplus": softplus,
    "cumsum": cumsum,
    "transpose": transpose,
    "reshape": reshape,
    "where": where,
    "take_last": take_last,
}


def forward_op(op: str, *inputs, **kwargs) -> Tensor:
    """Apply a registered op by name."""
    try:
        fn = OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}") from None
    return fn(*inputs, **kwargs)


# ----------------------------------------------------------------------
# parameters and optimizers


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class MissingGradError(ValueError):
    pass


@dataclass
class OptimizerState:
    """Optimizer hyper-parameters, schedule position and per-parameter buffers.

    ``schedule`` is ``"constant"`` or ``"cosine"``; the cosine schedule anneals
    from ``learning_rate`` to zero over ``total_steps``.
    """

    kind: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    schedule: str = "constant"
    total_steps: int = 0
    step_count: int = 0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.kind == "sgd":
            self.kind = "sgd_momentum"
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.schedule == "cosine" and self.total_steps <= 0:
            raise ValueError("cosine schedule needs total_steps > 0")

    def current_lr(self) -> float:
        return scheduled_lr(self.learning_rate, self.schedule, self.step_count, self.total_steps)


def scheduled_lr(lr0: float, schedule: str, t: int, total: int) -> float:
    if schedule == "constant":
        return lr0
    t = min(t, total)
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total))


def optimizer_step(state: OptimizerState, params: Sequence[Tensor]) -> None:
    """Update ``params`` in place from their ``.grad`` and advance the schedule."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise MissingGradError(f"parameter {p.name or i} has no gradient")
    lr = state.current_lr()
    t = state.step_count + 1
    for i, p in enumerate(params):
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        buf = state.buffers.setdefault(i, {})
        if state.kind == "sgd_momentum":
            if state.momentum:
                v = buf.get("v")
                v = g.copy() if v is None else state.momentum * v + g
                buf["v"] = v
                g = v
            p.data -= lr * g
        else:
            m = buf.get("m", np.zeros_like(p.data))
            v = buf.get("v", np.zeros_like(p.data))
            m = state.beta1 * m + (1.0 - state.beta1) * g
            v = state.beta2 * v + (1.0 - state.beta2) * g * g
            buf["m"], buf["v"] = m, v
            mhat = m / (1.0 - state.beta1**t)
            vhat = v / (1.0 - state.beta2**t)
            p.data -= lr * mhat / (np.sqrt(vhat) + state.epsilon)
    state.step_count = t


class Optimizer:
    """Binds an :class:`OptimizerState` to a fixed parameter list."""

    def __init__(self, params: Iterable[Tensor], state: OptimizerState):
        self.params = list(params)
        self.state = state

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        optimizer_step(self.state, self.params)

    @property
    def lr(self) -> float:
        return self.state.current_lr()
