"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a row-major :class:`numpy.ndarray` (float32 by default,
float64 for gradient checks). Every differentiable operation is a
:class:`Function` subclass: its ``forward`` works on raw arrays and its
``backward`` maps the output gradient to one gradient per input. The class
name of the creator function is the backward-rule tag of a node.
"""

import contextlib
import logging
from collections.abc import Iterator
from collections.abc import Sequence
from typing import Any

import numpy as np

from .utils import ShapeError

logger = logging.getLogger(__name__)

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording, for inference and finite-difference evaluations."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out the axes numpy broadcasting added or stretched, so that ``grad`` matches ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """Base class of differentiable operations."""

    def __init__(self, *parents: "Tensor"):
        self.parents = parents

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *inputs: "Tensor | np.ndarray | float", **kwargs: Any) -> "Tensor":
        tensors = tuple(as_tensor(value) for value in inputs)
        # constants follow the dtype of the tensors they combine with
        leading = (
            [t for t in tensors if t.requires_grad]
            or [t for t in tensors if t.data.ndim]
            or list(tensors)
        )
        dtype = np.result_type(*(t.data.dtype for t in leading))
        tensors = tuple(
            Tensor(t.data.astype(dtype), requires_grad=False)
            if not t.requires_grad and t.data.dtype != dtype
            else t
            for t in tensors
        )
        func = cls(*tensors)
        out = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = _grad_enabled and any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=requires_grad, creator=func if requires_grad else None)


class Tensor:
    """A node of the computation graph holding a dense array and, for leaves, its accumulated gradient."""

    def __init__(
        self,
        data: np.ndarray | float | int | Sequence,
        requires_grad: bool = False,
        creator: Function | None = None,
        dtype: Any = None,
        name: str | None = None,
    ):
        array = np.asarray(data, dtype=dtype)
        if array.dtype not in FLOAT_DTYPES:
            array = array.astype(np.float32)
        self.data = array
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.creator = creator
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", creator={self.creator.__class__.__name__}" if self.creator else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def backward(self) -> None:
        """Propagate gradients from this scalar node to every leaf requiring them.

        Leaf gradients accumulate across calls; use :meth:`zero_grad` between steps.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return

        order = self._topological_order()
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node.creator is None:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            parent_grads = node.creator.backward(grad)
            for parent, parent_grad in zip(node.creator.parents, parent_grads, strict=True):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if parent_grad.shape != parent.shape:
                    parent_grad = unbroadcast(parent_grad, parent.shape)
                key = id(parent)
                grads[key] = grads[key] + parent_grad if key in grads else parent_grad

    def _topological_order(self) -> list["Tensor"]:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node.creator is not None:
                for parent in node.creator.parents:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return order

    def __add__(self, other: "Tensor | float") -> "Tensor":
        return Add.apply(self, other)

    def __radd__(self, other: "Tensor | float") -> "Tensor":
        return Add.apply(other, self)

    def __sub__(self, other: "Tensor | float") -> "Tensor":
        return Add.apply(self, Neg.apply(other))

    def __rsub__(self, other: "Tensor | float") -> "Tensor":
        return Add.apply(other, Neg.apply(self))

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        return Mul.apply(self, other)

    def __rmul__(self, other: "Tensor | float") -> "Tensor":
        return Mul.apply(other, self)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return MatMul.apply(self, other)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        total = self.sum(axis=axis, keepdims=keepdims)
        return total * (total.size / self.size)

    def reshape(self, *shape: int) -> "Tensor":
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes: int) -> "Tensor":
        return Transpose.apply(self, axes=axes or None)

    def take(self, indices: np.ndarray, axis: int) -> "Tensor":
        return Take.apply(self, indices=np.asarray(indices, dtype=np.int64), axis=axis)


def as_tensor(value: "Tensor | np.ndarray | float | int") -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


def parameter(data: np.ndarray, name: str | None = None) -> Tensor:
    """Create a leaf tensor that requires gradients."""
    return Tensor(data, requires_grad=True, name=name)


class Add(Function):
    def forward(self, x, y):
        return x + y

    def backward(self, grad):
        return grad, grad


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Mul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return grad * self.y, grad * self.x


class MatMul(Function):
    def forward(self, x, y):
        if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
            raise ShapeError(f"matmul needs (m, k) @ (k, n), got {x.shape} @ {y.shape}")
        self.x, self.y = x, y
        return x @ y

    def backward(self, grad):
        return grad @ self.y.T, self.x.T @ grad


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape = x.shape
        self.axis = axis
        self.keepdims = keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            axes = (self.axis,) if isinstance(self.axis, int) else self.axis
            axes = tuple(a % len(self.shape) for a in axes)
            grad = np.expand_dims(grad, axes)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    def forward(self, x, shape):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, x, axes=None):
        self.axes = axes if axes is not None else tuple(reversed(range(x.ndim)))
        return np.transpose(x, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Take(Function):
    """Gather slices along one axis; the workhorse of channel permutations and group slicing."""

    def forward(self, x, indices, axis):
        if indices.size and (indices.min() < -x.shape[axis] or indices.max() >= x.shape[axis]):
            raise ShapeError(f"take indices out of range for axis {axis} of size {x.shape[axis]}")
        self.shape = x.shape
        self.indices = indices
        self.axis = axis
        return np.take(x, indices, axis=axis)

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        index = (slice(None),) * (self.axis % len(self.shape)) + (self.indices,)
        np.add.at(out, index, grad)
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis=1):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    if len(tensors) == 1:
        return tensors[0]
    reference = tensors[0].shape
    for tensor in tensors[1:]:
        if tensor.ndim != len(reference):
            raise ShapeError(f"concat rank mismatch: {reference} vs {tensor.shape}")
        for ax, (a, b) in enumerate(zip(reference, tensor.shape, strict=True)):
            if ax != axis % len(reference) and a != b:
                raise ShapeError(f"concat size mismatch on axis {ax}: {a} vs {b}")
    return Concat.apply(*tensors, axis=axis)
