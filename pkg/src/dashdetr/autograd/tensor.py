"""Dense float64 tensors with a dynamic reverse-mode tape.

Every differentiable op appends a node to the current :class:`Tape` in
execution order, so the tape is topologically sorted by construction and
:func:`backward` simply walks it in reverse. A tape is single-use: once
``backward`` has run, the next recorded op opens a fresh tape and a second
``backward`` on the old loss raises instead of silently re-accumulating.

Broadcasting is deliberately narrow. Two operands must have equal shapes,
or one of them is a scalar, or one shape is a trailing suffix of the other
(``[B, S, D] + [D]``, ``[B, S, D] + [S, D]``). Anything else is rejected.
"""

from __future__ import annotations

import contextlib
import weakref
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "no_grad",
    "elementwise",
    "matmul",
    "softmax",
    "log_softmax",
    "layer_norm",
    "concat",
    "stack",
    "ShapeError",
]

DTYPE = np.float64


class NonFiniteError(ValueError):
    """NaN or infinity reached an operation that cannot absorb it."""


class ShapeError(ValueError):
    pass


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)


class _Node:
    # ``out`` is a weak reference: a strong one would form a tensor<->node
    # cycle that keeps whole graphs (and their arrays) alive until cyclic GC.
    __slots__ = ("out", "inputs", "grad_fn", "name")

    def __init__(self, out, inputs, grad_fn, name):
        self.out = weakref.ref(out)
        self.inputs = inputs
        self.grad_fn = grad_fn
        self.name = name


_state = {"tape": Tape(), "enabled": True}


def current_tape() -> Tape:
    if _state["tape"].consumed:
        _state["tape"] = Tape()
    return _state["tape"]


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them (inference, metric evaluation)."""
    prev = _state["enabled"]
    _state["enabled"] = False
    try:
        yield
    finally:
        _state["enabled"] = prev


class Tensor:
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) else data.astype(DTYPE, copy=False)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self._node: _Node | None = None
        self._tape: Tape | None = None

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _result(cls, data: np.ndarray, inputs: Sequence["Tensor"], grad_fn: Callable, name: str) -> "Tensor":
        needs = _state["enabled"] and any(t.requires_grad for t in inputs)
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = needs
        out.name = None
        out.grad = None
        out._node = None
        out._tape = None
        if needs:
            tape = current_tape()
            node = _Node(out, tuple(inputs), grad_fn, name)
            tape.nodes.append(node)
            out._node = node
            out._tape = tape
        return out

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
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", _as_tensor(other), self)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", _as_tensor(other), self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", _as_tensor(other), self)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", _as_tensor(other), self)

    def __neg__(self):
        return elementwise("mul", self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def relu(self):
        return elementwise("relu", self)

    def sigmoid(self):
        return elementwise("sigmoid", self)

    def exp(self):
        return elementwise("exp", self)

    def log(self):
        return elementwise("log", self)

    def abs(self):
        return elementwise("abs", self)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return reduce_sum(self, axis, keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _raise_item(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


# -- broadcasting -------------------------------------------------------------

def _check_broadcast(sa: tuple, sb: tuple) -> tuple:
    if sa == sb:
        return sa
    if len(sb) == 0 or sb == (1,):
        return sa
    if len(sa) == 0 or sa == (1,):
        return sb
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"cannot broadcast shapes {sa} and {sb} (only equal, scalar or trailing-suffix shapes)")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0 or shape == (1,):
        return np.asarray(grad.sum()).reshape(shape)
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


# -- elementwise ---------------------------------------------------------------

_UNARY = {"relu", "sigmoid", "exp", "log", "abs", "sqrt", "tanh"}
_BINARY = {"add", "sub", "mul", "div", "maximum", "minimum"}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Apply an elementwise op; ``b`` is ignored for unary kinds."""
    a = _as_tensor(a)
    if op_kind in _UNARY:
        return _unary(op_kind, a)
    if op_kind not in _BINARY:
        raise ValueError(f"unknown op_kind {op_kind!r}")
    b = _as_tensor(b)
    sa, sb = a.shape, b.shape
    _check_broadcast(sa, sb)
    x, y = a.data, b.data

    if op_kind == "add":
        out = x + y
        fn = lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    elif op_kind == "sub":
        out = x - y
        fn = lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    elif op_kind == "mul":
        out = x * y
        fn = lambda g: (_unbroadcast(g * y, sa), _unbroadcast(g * x, sb))
    elif op_kind == "div":
        if np.any(y == 0):
            raise ZeroDivisionError("division by zero in tensor div")
        out = x / y
        fn = lambda g: (_unbroadcast(g / y, sa), _unbroadcast(-g * x / (y * y), sb))
    else:
        # ties send the whole gradient to the first operand
        pick = (x >= y) if op_kind == "maximum" else (x <= y)
        out = np.where(pick, x, y)
        fn = lambda g: (_unbroadcast(np.where(pick, g, 0.0), sa), _unbroadcast(np.where(pick, 0.0, g), sb))
    return Tensor._result(out, (a, b), fn, op_kind)


def _unary(kind: str, a: Tensor) -> Tensor:
    x = a.data
    if kind == "relu":
        mask = x > 0
        out = np.where(mask, x, 0.0)
        fn = lambda g: (g * mask,)
    elif kind == "sigmoid":
        out = _sigmoid(x)
        fn = lambda g: (g * out * (1.0 - out),)
    elif kind == "exp":
        out = np.exp(x)
        fn = lambda g: (g * out,)
    elif kind == "log":
        if np.any(x <= 0):
            raise ValueError("log of non-positive input")
        out = np.log(x)
        fn = lambda g: (g / x,)
    elif kind == "abs":
        out = np.abs(x)
        sign = np.sign(x)
        fn = lambda g: (g * sign,)
    elif kind == "sqrt":
        if np.any(x < 0):
            raise ValueError("sqrt of negative input")
        out = np.sqrt(x)
        fn = lambda g: (g * 0.5 / out,)
    else:
        out = np.tanh(x)
        fn = lambda g: (g * (1.0 - out * out),)
    return Tensor._result(out, (a,), fn, kind)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- shape ops -----------------------------------------------------------------

def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(out, (a,), fn, "sum")


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    out = a.data.reshape(shape)
    return Tensor._result(out, (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return Tensor._result(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def take(a: Tensor, index) -> Tensor:
    """Basic slicing or integer-array indexing with scatter-add gradient."""
    shape = a.shape
    if isinstance(index, Tensor):
        raise TypeError("index with numpy arrays, not tensors")
    out = a.data[index]

    def fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(np.array(out, dtype=DTYPE), (a,), fn, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]
    return Tensor._result(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return Tensor._result(
        out, tuple(tensors), lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack"
    )


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a 2-D matrix shared across all leading axes of ``a`` or has
    exactly the same leading batch axes as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch axes differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    out = x @ y
    shared = b.ndim == 2

    def fn(g):
        ga = g @ np.swapaxes(y, -1, -2)
        if shared:
            gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(x, -1, -2) @ g
        return ga, gb

    return Tensor._result(out, (a, b), fn, "matmul")


# -- fused numerics ------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    x = _as_tensor(x)
    top = x.data.max(axis=axis, keepdims=True)
    # max propagates NaN and inf, so checking the row maxima is enough
    if not np.isfinite(top).all():
        raise NonFiniteError("softmax input contains NaN or infinity")
    out = np.exp(x.data - top)
    out /= out.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), fn, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    top = x.data.max(axis=axis, keepdims=True)
    if not np.isfinite(top).all():
        raise NonFiniteError("log_softmax input contains NaN or infinity")
    z = x.data - top
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return Tensor._result(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


LN_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if axis not in (-1, x.ndim - 1):
        raise ValueError("layer_norm only normalises the last axis")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def fn(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._result(out, (x, gain, bias), fn, "layer_norm")


# -- backward ------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Leaf gradients accumulate into the existing buffer (which the optimizer
    zeroes after each step); a tape can be replayed only once.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss._node is None:
        raise RuntimeError("loss was not produced by a recorded operation")
    if tape.consumed:
        raise RuntimeError("backward already ran on this tape; run a new forward pass first")
    if not tape.nodes:
        raise RuntimeError("tape is empty")

    grads: dict[_Node, np.ndarray] = {loss._node: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node, None)
        if g is None:
            continue
        out = node.out()
        if out is not None:
            out.grad = g
        local = node.grad_fn(g)
        for inp, gi in zip(node.inputs, local):
            if not inp.requires_grad or gi is None:
                continue
            if inp._node is None or inp._tape is not tape:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gi
            else:
                key = inp._node
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    tape.consumed = True
    tape.nodes = []


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return float(np.sqrt(total))
