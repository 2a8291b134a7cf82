"""
Dense float64 tensors with a define-by-run reverse-mode gradient tape.

Every op checks shapes explicitly; the only implicit broadcast is
multiplication by a Python scalar (``scale``). Anything else that needs
broadcasting goes through :func:`expand`.

The graph is recorded through parent references on each output tensor;
:func:`backward` topologically sorts the reachable graph (the tape) and
visits each node exactly once in reverse order.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError

EPS = 1e-12

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Suspend graph recording on this thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A float64 array, optionally tracked for gradients.

    Only leaf tensors created with ``requires_grad=True`` accumulate into
    ``grad``; intermediate gradients live only for the duration of a
    backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.size == 0:
            raise DegenerateInputError(f"tensor extents must be positive, got shape {arr.shape}")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _wrap(data: np.ndarray) -> Tensor:
    # op outputs are fresh arrays; skip the defensive copy in __init__
    if data.size == 0:
        raise DegenerateInputError(f"tensor extents must be positive, got shape {data.shape}")
    out = Tensor.__new__(Tensor)
    data = np.asarray(data, dtype=np.float64)
    data.setflags(write=False)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    return out


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = _wrap(np.asarray(data))
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return g @ B.T, A.T @ g

    return _make(A @ B, (a, b), bw, "matmul")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return _make(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def absolute(a: Tensor) -> Tensor:
    a = as_tensor(a)
    sgn = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sgn,), "abs")


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add, mul, relu, sigmoid, scale (b is the scalar)."""
    table = {
        "add": lambda: add(a, b),
        "mul": lambda: mul(a, b),
        "relu": lambda: relu(a),
        "sigmoid": lambda: sigmoid(a),
        "scale": lambda: scale(a, b),
        "tanh": lambda: tanh(a),
        "abs": lambda: absolute(a),
        "sub": lambda: sub(a, b),
    }
    if kind not in table:
        raise ContractError(f"unknown elementwise op {kind!r}")
    return table[kind]()


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(ax % ndim for ax in axes))


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return _make(a.data.sum(axis=axes), (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum(a, axes), 1.0 / count)


def mean_over_batch(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.ndim < 1:
        raise DegenerateInputError("mean_over_batch needs a batch axis")
    return mean(a, 0)


def gap(a: Tensor) -> Tensor:
    """Global average pool over the two spatial axes of a ``(..., W, H, C)`` map."""
    a = as_tensor(a)
    if a.ndim < 3:
        raise DimensionError(f"gap expects (..., W, H, C), got {a.shape}")
    return mean(a, (a.ndim - 3, a.ndim - 2))


def reduce(kind: str, a: Tensor, axis=None) -> Tensor:
    table = {"sum": sum, "mean": mean}
    if kind in table:
        return table[kind](a, axis)
    if kind == "mean_over_batch":
        return mean_over_batch(a)
    if kind == "gap":
        return gap(a)
    raise ContractError(f"unknown reduction {kind!r}")


# ---------------------------------------------------------------- normalisation / softmax

def normalize_l2(a: Tensor, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit L2 norm."""
    a = as_tensor(a)
    x = a.data
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    if np.any(n <= EPS):
        raise DegenerateInputError("normalize_l2: vector with near-zero norm")
    y = x / n

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - y * dot) / n,)

    return _make(y, (a,), bw, "normalize_l2")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


# ---------------------------------------------------------------- shape plumbing

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: {old} -> {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast along axes of extent 1 (same rank required)."""
    a = as_tensor(a)
    shape = tuple(shape)
    if len(shape) != a.ndim or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise DimensionError(f"expand: cannot broadcast {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)

    def bw(g):
        return (g.sum(axis=axes, keepdims=True),)

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), bw, "expand")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat of an empty list")
    nd = parts[0].ndim
    ax = axis % nd
    for p in parts[1:]:
        if p.ndim != nd or any(p.shape[i] != parts[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(
                f"concat: incompatible shapes {[q.shape for q in parts]} on axis {axis}"
            )
    sizes = [p.shape[ax] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(np.concatenate([p.data for p in parts], axis=ax), parts, bw, "concat")


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("stack of an empty list")
    nd = parts[0].ndim + 1
    ax = axis % nd
    return concat([reshape(p, p.shape[:ax] + (1,) + p.shape[ax:]) for p in parts], axis=ax)


def take(a: Tensor, indices: Sequence[int], axis: int = 0) -> Tensor:
    """Gather entries along ``axis``; repeated indices accumulate gradients."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % a.ndim
    if idx.size == 0 or idx.min() < -a.shape[ax] or idx.max() >= a.shape[ax]:
        raise DimensionError(f"take: indices out of range for axis {axis} of {a.shape}")
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, (slice(None),) * ax + (idx,), g)
        return (out,)

    return _make(np.take(a.data, idx, axis=ax), (a,), bw, "take")


def slice_axis(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    return take(a, range(start, stop), axis)


# ---------------------------------------------------------------- backward

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that need gradients, inputs first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if not isinstance(loss, Tensor) or loss.size != 1 or loss.ndim > 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward needs a scalar loss, got shape {shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss is not connected to any parameter")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- finite differences

def numerical_grad(f: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to every entry of ``param``.

    ``param.data`` is temporarily swapped for perturbed copies; the closure must
    read the parameter each call (define-by-run makes that automatic).
    """
    base = param.data
    flat = base.reshape(-1).copy()
    out = np.zeros(flat.size)
    try:
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            param.data = flat.reshape(base.shape).copy()
            fp = f().item()
            flat[i] = orig - h
            param.data = flat.reshape(base.shape).copy()
            fm = f().item()
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    finally:
        param.data = base
    return out.reshape(base.shape)


def gradcheck(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-7,
) -> dict:
    """Compare tape gradients against central differences for every entry.

    An entry passes when ``|a - n| <= max(atol, rtol * max(|a|, |n|))``.
    Returns a report with ``ok``, ``worst`` (largest violation ratio) and ``checked``.
    """
    zero_grad(params)
    backward(f())
    worst = 0.0
    checked = 0
    failures = []
    for k, p in enumerate(params):
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        numeric = numerical_grad(f, p, h)
        diff = np.abs(analytic - numeric)
        tol = np.maximum(atol, rtol * np.maximum(np.abs(analytic), np.abs(numeric)))
        ratio = diff / tol
        worst = max(worst, float(ratio.max()))
        checked += p.size
        if np.any(ratio > 1.0):
            failures.append(k)
    zero_grad(params)
    return {"ok": not failures, "worst": worst, "checked": checked, "failures": failures}
