"""Small reverse-mode autodiff engine on top of numpy.

Every trainable weight in the package is a :class:`Tensor`.  Operations build a
graph of closures; :meth:`Tensor.backward` walks it in reverse topological order.
All arithmetic is float64.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


# per-thread, so inference under no_grad cannot switch off another thread's training
_mode = threading.local()


def grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording a gradient graph (in the calling thread)."""
    previous = grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = previous


class Tensor:
    """N-dimensional float64 array that can take part in a gradient graph."""

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Optional[BackwardFn] = None,
        _op: str = "",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Backpropagate from this tensor, which must be a scalar."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
        if grad is None:
            grad = np.ones_like(self.data)
        GradGraph(self).backward(grad)

    # elementwise arithmetic
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("mul", self, -1.0) + other

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __neg__(self):
        return elementwise("mul", self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)


class GradGraph:
    """Topologically ordered view of everything reachable from a root tensor."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = _topological_order(root)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, grad: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.root): np.asarray(grad, dtype=np.float64)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; deep graphs would overflow recursion
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn, op: str) -> Tensor:
    parents = tuple(parents)
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, _op=op)
    return Tensor(data, _op=op)


def elementwise(op: str, a: Tensor, b) -> Tensor:
    """Apply add/sub/mul/div to equal-shape tensors, or a tensor and a scalar."""
    a = as_tensor(a)
    if isinstance(b, Tensor):
        if b.shape != a.shape and b.shape != ():
            raise ValueError(f"shape mismatch for {op}: {a.shape} vs {b.shape}")
    elif np.ndim(b) != 0:
        raise ValueError(f"{op} expects a Tensor or a scalar, got array of shape {np.shape(b)}")
    else:
        b = Tensor(float(b))

    x, y = a.data, b.data
    scalar_b = b.shape == () and a.shape != ()

    def reduce_b(g):
        return np.asarray(g.sum()) if scalar_b else g

    if op == "add":
        out = x + y

        def backward(g):
            return g, reduce_b(g)
    elif op == "sub":
        out = x - y

        def backward(g):
            return g, reduce_b(-g)
    elif op == "mul":
        out = x * y

        def backward(g):
            return g * y, reduce_b(g * x)
    elif op == "div":
        out = x / y

        def backward(g):
            return g / y, reduce_b(-g * x / (y * y))
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return _make(out, (a, b), backward, op)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        ga = g @ B.T if a.requires_grad else None
        gb = A.T @ g if b.requires_grad else None
        return ga, gb

    return _make(A @ B, (a, b), backward, "matmul")


def tsum(a: Tensor) -> Tensor:
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum()), (a,), backward, "sum")


def tmean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size

    def backward(g):
        return (np.full(shape, float(g) / n),)

    return _make(np.asarray(a.data.mean()), (a,), backward, "mean")


def tabs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def backward(g):
        return (g * sign,)

    return _make(np.abs(a.data), (a,), backward, "abs")


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _make(a.data * mask, (a,), backward, "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), backward, "tanh")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape

    def backward(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(a.data, axes), (a,), backward, "transpose")
