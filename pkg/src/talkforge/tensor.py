"""Dense float64 tensors with reverse-mode automatic differentiation.

A Tensor wraps a row-major numpy float64 array. Every op records its
parent tensors and a backward closure; ``backward(loss)`` traces the
reachable graph into a :class:`Tape` (inputs always precede the ops that
consume them) and replays it once in reverse, accumulating gradients.

Broadcasting is deliberately restricted: two operands must have equal
shapes, or the smaller shape must be a trailing suffix of the larger
(leading-axis batching, e.g. a ``[d]`` bias against ``[t, d]`` data, or a
``[t, t]`` mask against ``[h, t, t]`` scores). This keeps every backward
rule short enough to audit by eye.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _np_erf

from .errors import ContractError, DeterminismError, NaNError, ShapeError

Array = np.ndarray

__all__ = [
    "Tensor",
    "Tape",
    "rng",
    "no_grad",
    "backward",
    "grad_check",
    "matmul",
    "softmax",
    "log_softmax",
    "take_rows",
    "gather_cols",
    "concat",
]


def rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator -- the only randomness source in the library."""
    return np.random.Generator(np.random.PCG64(seed))


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording; inference paths run in here."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: Array) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # --- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(_wrap(other), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, other ** -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        data = self.data ** p

        def bwd(out):
            self._accum(out.grad * p * self.data ** (p - 1.0))

        return _node(data, (self,), bwd)

    # --- shape ops --------------------------------------------------------

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        shape = tuple(shape)
        data = self.data.reshape(shape)
        old = self.shape

        def bwd(out):
            self._accum(out.grad.reshape(old))

        return _node(data, (self,), bwd)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        data = np.transpose(self.data, axes)

        def bwd(out):
            self._accum(np.transpose(out.grad, inv))

        return _node(data, (self,), bwd)

    # --- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        data = self.data.sum(axis=axis, keepdims=keepdims)
        in_shape = self.shape

        def bwd(out):
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, in_shape).copy())

        return _node(data, (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            n = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # --- elementwise ------------------------------------------------------

    def exp(self) -> "Tensor":
        data = np.exp(self.data)

        def bwd(out):
            self._accum(out.grad * data)

        return _node(data, (self,), bwd)

    def log(self) -> "Tensor":
        data = np.log(self.data)

        def bwd(out):
            self._accum(out.grad / self.data)

        return _node(data, (self,), bwd)

    def tanh(self) -> "Tensor":
        data = np.tanh(self.data)

        def bwd(out):
            self._accum(out.grad * (1.0 - data * data))

        return _node(data, (self,), bwd)

    def erf(self) -> "Tensor":
        data = _np_erf(self.data)
        x = self.data

        def bwd(out):
            self._accum(out.grad * (2.0 / math.sqrt(math.pi)) * np.exp(-x * x))

        return _node(data, (self,), bwd)

    def relu(self) -> "Tensor":
        data = np.maximum(self.data, 0.0)

        def bwd(out):
            self._accum(out.grad * (self.data > 0.0))

        return _node(data, (self,), bwd)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _node(data: Array, parents: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = lambda: bwd(out)
    return out


def _suffix_compatible(big: tuple[int, ...], small: tuple[int, ...]) -> bool:
    return len(small) <= len(big) and big[len(big) - len(small):] == small


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if _suffix_compatible(a.shape, b.shape) or _suffix_compatible(b.shape, a.shape):
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are incompatible "
                     "(only equal or trailing-suffix shapes combine)")


def _reduce_to(g: Array, shape: tuple[int, ...]) -> Array:
    # undo leading-axis broadcasting
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "add")
    data = a.data + b.data

    def bwd(out):
        a._accum(_reduce_to(out.grad, a.shape))
        b._accum(_reduce_to(out.grad, b.shape))

    return _node(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "mul")
    data = a.data * b.data

    def bwd(out):
        a._accum(_reduce_to(out.grad * b.data, a.shape))
        b._accum(_reduce_to(out.grad * a.data, b.shape))

    return _node(data, (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents disagree for shapes {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2] and a.ndim != 2 and b.ndim != 2:
        raise ShapeError(f"matmul: batch extents disagree for shapes {a.shape} and {b.shape}")
    data = np.matmul(a.data, b.data)

    def bwd(out):
        g = out.grad
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        a._accum(_reduce_to(ga, a.shape))
        b._accum(_reduce_to(gb, b.shape))

    return _node(data, (a, b), bwd)


def _check_nan(x: Tensor, op: str) -> None:
    if np.isnan(x.data).any():
        raise NaNError(f"{op}: input contains NaN")


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis`` (max-subtraction)."""
    x = _wrap(x)
    _check_nan(x, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(out):
        g = out.grad
        dot = (g * s).sum(axis=axis, keepdims=True)
        x._accum(s * (g - dot))

    return _node(s, (x,), bwd)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    _check_nan(x, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    s = np.exp(y)

    def bwd(out):
        g = out.grad
        x._accum(g - s * g.sum(axis=axis, keepdims=True))

    return _node(y, (x,), bwd)


def take_rows(w, idx) -> Tensor:
    """Gather rows ``w[idx]``; backward scatters into the used rows only."""
    w = _wrap(w)
    idx = np.asarray(idx, dtype=np.int64)
    data = w.data[idx]

    def bwd(out):
        if not w.requires_grad:
            return
        g = np.zeros_like(w.data)
        np.add.at(g, idx, out.grad)
        w._accum(g)

    return _node(data, (w,), bwd)


def gather_cols(x, cols) -> Tensor:
    """Pick one column per row from a 2-d tensor: out[i] = x[i, cols[i]]."""
    x = _wrap(x)
    if x.ndim != 2:
        raise ShapeError(f"gather_cols: expected 2-d input, got shape {x.shape}")
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(x.shape[0])
    data = x.data[rows, cols]

    def bwd(out):
        if not x.requires_grad:
            return
        g = np.zeros_like(x.data)
        np.add.at(g, (rows, cols), out.grad)
        x._accum(g)

    return _node(data, (x,), bwd)


def concat(a, b, axis: int = -1) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = np.concatenate([a.data, b.data], axis=axis)
    split = a.shape[axis]

    def bwd(out):
        ga, gb = np.split(out.grad, [split], axis=axis)
        a._accum(ga)
        b._accum(gb)

    return _node(data, (a, b), bwd)


class Tape:
    """Topologically ordered record of the ops reachable from a root tensor.

    ``nodes`` lists each tensor exactly once, with every tensor's parents
    appearing before the tensor itself.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[Tensor] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node in seen:
                continue
            seen.add(node)
            stack.append((node, True))
            for p in node._parents:
                if p not in seen:
                    stack.append((p, False))
        return cls(order)

    def replay_backward(self) -> None:
        for node in reversed(self.nodes):
            if node._backward is not None:
                node._backward()


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    Interior (op-produced) grads are per-pass scratch and reset here; leaf
    grads accumulate across repeated calls until cleared.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = Tape.trace(loss)
    for node in tape.nodes:
        if node._parents:
            node.grad = None
    if loss._parents:
        loss.grad = np.ones_like(loss.data)
    else:
        loss._accum(np.ones_like(loss.data))
    tape.replay_backward()


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic taped scalar function of ``x``; it is
    evaluated twice up front and a mismatch raises DeterminismError.
    """
    if not (0.0 < eps <= 1e-2):
        raise ContractError(f"grad_check: eps must lie in (0, 1e-2], got {eps}")
    x.requires_grad = True
    y0 = f(x)
    y1 = f(x)
    if not np.array_equal(y0.data, y1.data):
        raise DeterminismError("grad_check: f returned differing values on repeat evaluation")
    if y1.size != 1:
        raise ContractError(f"grad_check: f must return a scalar, got shape {y1.shape}")

    x.zero_grad()
    backward(y1)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2.0 * eps)

    rel = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
    return float(rel.max()) if rel.size else 0.0
