"""
Tensor and graph recording for reverse-mode differentiation.

How it works:
1. Every differentiable operation is a `Function` subclass with a numpy
   forward and backward.
2. `Function.apply` runs the forward pass and links the output tensor to the
   function instance, which keeps references to its input tensors. These
   creator links form the (acyclic) graph.
3. `backward(loss)` walks the graph in reverse topological order and sums the
   gradient contributions of every path into each leaf.

Precision is float32 by default; `float64_mode()` switches new tensors to
float64 for gradient checking. Both switches are thread-local so MC samples
may run on worker threads.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Any, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import NotScalarError, ShapeError

MAX_RANK = 4

_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.float32)


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def float64_mode() -> Iterator[None]:
    """Create tensors in 64-bit precision inside the block (gradient checks only)"""
    previous = default_dtype()
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = previous


@contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording a graph"""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """
    Dense array of rank <= 4 with an optional gradient.

    Layout for feature maps is batch x channel x row x col, row-major.
    Leaves created by the user have no creator; `requires_grad` marks the
    leaves backward() should fill.
    """

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _creator: Optional["Function"] = None,
    ):
        array = np.asarray(data, dtype=default_dtype())
        if array.ndim > MAX_RANK:
            raise ShapeError(f"tensor rank {array.ndim} exceeds {MAX_RANK}", [array.shape])
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self._creator = _creator

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> List[int]:
        return list(self.data.shape)

    @property
    def is_leaf(self) -> bool:
        return self._creator is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self, wrt: Optional[Sequence["Tensor"]] = None) -> List[np.ndarray]:
        return backward(self, wrt)

    def __add__(self, other: Any) -> "Tensor":
        from .ops import add
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other: Any) -> "Tensor":
        from .ops import mul
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        from .ops import tensor_sum
        return tensor_sum(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(dims={self.dims}{label}, requires_grad={self.requires_grad})"


def _as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement `forward` on numpy arrays and `backward`, which maps
    the gradient of the output to one gradient (or None) per input tensor.
    Anything the backward pass needs is stored on the instance.
    """

    def __init__(self, *parents: Tensor):
        self.parents = parents

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs: Any) -> Tensor:
        fn = cls(*tensors)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        record = is_grad_enabled() and any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=record, _creator=fn if record else None)

    @staticmethod
    def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        """Sum out dimensions that numpy broadcasting introduced"""
        if grad.shape == shape:
            return grad
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for axis, extent in enumerate(shape):
            if extent == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._creator is not None:
            for parent in node._creator.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, wrt: Optional[Sequence[Tensor]] = None) -> List[np.ndarray]:
    """
    Back-propagate from a scalar loss.

    Every reachable leaf with requires_grad gets `.grad` set to the total
    gradient of this pass (contributions along multiple paths are summed).
    Leaves listed in `wrt` always receive a gradient, zeros if the loss does
    not depend on them; their gradients are also returned in order.
    """
    if loss.data.size != 1:
        raise NotScalarError(f"loss must be a scalar, got dims {loss.dims}")

    if wrt is not None:
        for leaf in wrt:
            leaf.grad = np.zeros_like(leaf.data)

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node._creator is None:
            if node.requires_grad:
                node.grad = grad.astype(node.data.dtype, copy=False)
            continue
        parent_grads = node._creator.backward(grad)
        for parent, parent_grad in zip(node._creator.parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad

    if wrt is None:
        return []
    return [leaf.grad for leaf in wrt]
