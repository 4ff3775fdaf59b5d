"""Dense tensors with tape-based reverse-mode differentiation, built on numpy.

Every op returns a new :class:`Tensor`. When any input requires a gradient the
result remembers its parents and a closure mapping the upstream gradient to one
gradient per parent. :func:`backward` orders the recorded graph into a
:class:`Tape` and walks it once in reverse.

Numeric width is chosen per process with :func:`precision` (32-bit by default,
64-bit for finite-difference checks). Gradients accumulate into ``.grad`` across
backward calls until :meth:`Tensor.zero_grad` is called.

``-inf`` is the masking sentinel (causal attention, QA segment masks). The debug
finiteness check therefore rejects NaN and ``+inf`` only.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NumericError

_DTYPES = {"float32": np.float32, "float64": np.float64}

_default_dtype = np.float32
_grad_enabled = True
_debug = False


def get_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the dtype used for freshly created tensors."""
    global _default_dtype
    if name not in _DTYPES:
        raise ContractError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    prev = _default_dtype
    _default_dtype = _DTYPES[name]
    try:
        yield
    finally:
        _default_dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug(flag: bool) -> None:
    """Turn the after-every-op NaN/+inf check on or off."""
    global _debug
    _debug = bool(flag)


@contextlib.contextmanager
def debug_mode(flag: bool = True) -> Iterator[None]:
    prev = _debug
    set_debug(flag)
    try:
        yield
    finally:
        set_debug(prev)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t.op = "leaf"
        return t

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _raise_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_default_dtype), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_default_dtype), requires_grad=requires_grad)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=like.dtype))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    if _debug and (np.isnan(data).any() or np.isposinf(data).any()):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor._wrap(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_axis(axis, ndim: int) -> None:
    axes = axis if isinstance(axis, tuple) else (axis,)
    for a in axes:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for rank {ndim}")


# --------------------------------------------------------------------------- #
# elementwise


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a)

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), back, "mul")


def div(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), back, "div")


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,), "neg")


def power(x: Tensor, p: float) -> Tensor:
    out = x.data**p
    return _result(out, (x,), lambda g: (g * p * x.data ** (p - 1),), "pow")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * v) + 1.0)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s
    return _result(out, (x,), lambda g: (g * (s + out * (1.0 - s)),), "silu")


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data).astype(x.dtype, copy=False)
    return _result(out, (x,), lambda g: (g * _sigmoid(x.data),), "softplus")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


_ELEMENTWISE = {
    "neg": neg,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "silu": silu,
    "softplus": softplus,
    "tanh": tanh,
}
_BINARY = {"add": add, "mul": mul}


def elementwise(x: Tensor, fn: str, other=None) -> Tensor:
    """Dispatch a pointwise op by name; ``add``/``mul`` take a second operand."""
    if fn in _BINARY:
        if other is None:
            raise ContractError(f"{fn} needs a second operand")
        return _BINARY[fn](x, other)
    try:
        return _ELEMENTWISE[fn](x)
    except KeyError:
        raise ContractError(f"unknown elementwise op {fn!r}") from None


# --------------------------------------------------------------------------- #
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = gb = None
        if b.ndim == 2:
            if a.requires_grad:
                ga = g @ b.data.T
            if b.requires_grad:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            if a.requires_grad:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(out, (a, b), back, "matmul")


# --------------------------------------------------------------------------- #
# reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is not None:
        _check_axis(axis, x.ndim)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _result(out, (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is not None:
        _check_axis(axis, x.ndim)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]))
    return sum_(x, axis, keepdims) * (1.0 / count)


def max_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is not None:
        _check_axis(axis, x.ndim)
    kept = x.data.max(axis=axis, keepdims=True)
    out = kept if keepdims else np.asarray(x.data.max(axis=axis))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        hit = x.data == kept
        return (hit * g / hit.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), back, "max")


_REDUCE = {"sum": sum_, "mean": mean, "max": max_}


def reduce(x: Tensor, fn: str, axis=None, keepdims: bool = False) -> Tensor:
    try:
        op = _REDUCE[fn]
    except KeyError:
        raise ContractError(f"unknown reduction {fn!r}") from None
    return op(x, axis, keepdims)


# --------------------------------------------------------------------------- #
# shape and indexing


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _result(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    basic = _is_basic(idx)

    def back(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _result(np.ascontiguousarray(out), (x,), back, "getitem")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _result(out, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([p.data for p in parts], axis=axis)
    n = len(parts)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _result(out, tuple(parts), back, "stack")


def take_rows(weight: Tensor, ids) -> Tensor:
    """Embedding lookup: ``weight[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DimensionError(f"row id out of range for table of {weight.shape[0]} rows")

    def back(g):
        gw = np.zeros(weight.shape, dtype=weight.dtype)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, *weight.shape[1:]))
        return (gw,)

    return _result(weight.data[ids], (weight,), back, "take_rows")


def gather_last(x: Tensor, idx) -> Tensor:
    """Pick ``x[..., idx[...]]`` along the last axis."""
    idx = np.asarray(idx)[..., None]
    out = np.take_along_axis(x.data, idx, axis=-1)[..., 0]

    def back(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        np.put_along_axis(gx, idx, g[..., None], axis=-1)
        return (gx,)

    return _result(out, (x,), back, "gather")


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, x.dtype.type(value), x.data)
    return _result(out, (x,), lambda g: (_unbroadcast(np.where(mask, 0.0, g), x.shape).astype(x.dtype, copy=False),), "masked_fill")


# --------------------------------------------------------------------------- #
# softmax family (last axis)


def softmax(x: Tensor) -> Tensor:
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    z = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), back, "softmax")


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a matrix (alias of :func:`softmax` on the last axis)."""
    return softmax(x)


def log_softmax(x: Tensor) -> Tensor:
    if np.isnan(x.data).any():
        raise NumericError("log_softmax input contains NaN")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), back, "log_softmax")


# --------------------------------------------------------------------------- #
# differentiation


@dataclass
class Tape:
    """Topologically ordered record of the ops reachable from one output."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
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
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def _propagate(loss: Tensor, tape: Tape) -> dict[int, np.ndarray]:
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[id(node)] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-requiring leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    tape = tape or Tape.record(loss)
    by_id = {id(n): n for n in tape.nodes}
    for key, g in _propagate(loss, tape).items():
        leaf = by_id[key]
        g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return tape


def grad(loss: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``inputs`` without touching any ``.grad``."""
    if loss.size != 1:
        raise ContractError(f"grad needs a scalar loss, got shape {loss.shape}")
    leaves = _propagate(loss, Tape.record(loss)) if loss.requires_grad else {}
    return [
        np.asarray(leaves.get(id(x), np.zeros(x.shape)), dtype=x.dtype).reshape(x.shape)
        for x in inputs
    ]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / (np.abs(a) + np.abs(n) + 1e-12)))


def numeric_grad(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every coordinate of leaf ``x``."""
    flat = x.data.reshape(-1)
    out = np.empty(flat.size, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(x).data)
            flat[i] = orig - eps
            fm = float(f(x).data)
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(x.shape)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Max relative gap between backprop and central differences for ``f`` at ``x``."""
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    was = x.requires_grad
    x.requires_grad = True
    try:
        (analytic,) = grad(f(x), [x])
    finally:
        x.requires_grad = was
    return relative_error(analytic, numeric_grad(f, x, eps))
