"""Tensor with tape-free reverse-mode differentiation.

Every differentiable op builds its output with :func:`make_result`, attaching the
parent tensors and a closure mapping the output gradient to one gradient per
parent.  :meth:`Tensor.backward` walks the graph in reverse topological order,
accumulates gradients, writes ``.grad`` on leaves that require it, and then
releases the graph so a second call fails loudly.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_state = threading.local()


class NumericError(RuntimeError):
    pass


class NonFiniteError(NumericError):
    """Raised when an op produces NaN or Inf."""


class GraphError(NumericError):
    pass


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dtype}")
    _state.dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default floating precision (e.g. float64 for gradient checks)."""
    old = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    old = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = old


def check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {where}")


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_released")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"
        self._released = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None if self.grad is None else np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    # -- operators (thin wrappers over ops) -------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.neg(as_tensor(other)))

    def __rsub__(self, other):
        from . import ops
        return ops.add(as_tensor(other), ops.neg(self))

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    # -- differentiation --------------------------------------------------
    def backward(self, grad=None) -> None:
        """Populate ``.grad`` on every reachable leaf that requires it.

        ``grad`` defaults to 1 for a scalar; non-scalar roots need an explicit
        upstream gradient of matching shape.
        """
        if self._released:
            raise GraphError("backward already ran on this graph; run a new forward pass first")
        if grad is None:
            if self.data.size != 1:
                raise GraphError(f"backward on non-scalar tensor of shape {self.shape} needs an explicit grad")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise GraphError(f"grad shape {grad.shape} does not match tensor shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("tensor does not require grad")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                check_finite(pg, f"backward of {node._op}")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._released = True


def _raise_item(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


class Parameter(Tensor):
    """A trainable leaf tensor.  ``trainable`` toggles whether optimizers see it."""

    __slots__ = ()

    def __init__(self, data, trainable: bool = True):
        arr = np.array(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        super().__init__(arr, requires_grad=trainable)
        self.grad = np.zeros_like(self.data)

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=default_dtype()))


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap ``data`` as the output of ``op``; records the graph only when a parent needs grad."""
    check_finite(data, op)
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out
