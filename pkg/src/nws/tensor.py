"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations needed by the NWS networks are provided. Gradients of
leaves accumulate across :meth:`Tensor.backward` calls until
:meth:`Tensor.zero_grad` is called (or ``grad`` is set to ``None``).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InvalidInputError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32
_grad_enabled = True


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """Set the repo-wide float precision (``"float32"`` or ``"float64"``)."""
    global _default_dtype
    _default_dtype = _resolve_dtype(dtype)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float precision."""
    global _default_dtype
    old = _default_dtype
    _default_dtype = _resolve_dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = old


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (evaluation passes)."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def _resolve_dtype(dtype):
    if isinstance(dtype, str):
        try:
            return _DTYPES[dtype]
        except KeyError:
            raise InvalidInputError(f"unsupported precision {dtype!r}") from None
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise InvalidInputError(f"unsupported precision {dtype!r}")
    return dtype


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Dense float array with optional gradient tracking.

    ``_backward`` maps the gradient of the output to a tuple of gradients,
    one per parent (``None`` where a parent gets nothing).
    """

    def __init__(self, data, requires_grad: bool = False, _parents: Sequence["Tensor"] = (),
                 _backward: Optional[Callable] = None, dtype=None):
        dtype = _default_dtype if dtype is None else dtype
        if isinstance(data, np.ndarray) and data.dtype == dtype:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = _backward

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Stop-gradient: same values, no history."""
        return Tensor(self.data, dtype=self.data.dtype)

    # -- graph construction helpers --------------------------------------
    @staticmethod
    def _lift(other, dtype) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=dtype), dtype=dtype)

    @staticmethod
    def make(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        """Create an op output; history is kept only if a parent needs grad."""
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        if not needs:
            return Tensor(data, dtype=data.dtype)
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward,
                      dtype=data.dtype)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = self._lift(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor.make(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor.make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        other = self._lift(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor.make(self.data - other.data, (self, other), backward)

    def __rsub__(self, other) -> "Tensor":
        return self._lift(other, self.dtype) - self

    def __mul__(self, other) -> "Tensor":
        other = self._lift(other, self.dtype)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor.make(a * b, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._lift(other, self.dtype)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor.make(a / b, (self, other), backward)

    def __pow__(self, exponent) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise InvalidInputError("only constant exponents are supported")
        a = self.data
        p = self.dtype.type(exponent)

        def backward(g):
            return (g * p * a ** (p - 1),)

        return Tensor.make(a ** p, (self,), backward)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor.make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)),
                           (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor.make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    # -- backprop ---------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Backpropagate from this scalar into every leaf with ``requires_grad``."""
        if self.size != 1:
            raise InvalidInputError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise InvalidInputError("loss is not connected to any tensor requiring grad")
        order = _topological_order(self)
        pending = {id(self): np.ones_like(self.data) if grad is None else np.asarray(grad, self.dtype)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=_default_dtype), requires_grad=requires_grad)
