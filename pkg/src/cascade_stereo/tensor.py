"""Dense tensors with a recorded reverse-mode tape.

Storage is 32-bit by default. Every operation computes in float64 and casts
its result back to the storage dtype, so reductions accumulate in 64 bits.
``storage_dtype(np.float64)`` switches storage for finite-difference checks.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

MAX_RANK = 5

_state = threading.local()


def _get(name: str, default):
    return getattr(_state, name, default)


def current_dtype() -> np.dtype:
    return _get("dtype", np.dtype(np.float32))


def grad_enabled() -> bool:
    return _get("grad_enabled", True)


@contextlib.contextmanager
def storage_dtype(dtype) -> Iterator[None]:
    """Temporarily change the storage dtype of newly created tensors."""
    previous = current_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them on the tape."""
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """N-d array (rank 1 to 5) with an optional gradient buffer.

    ``_backward`` maps the float64 gradient of this tensor to float64
    gradients for each entry of ``_parents`` (``None`` where no gradient flows).
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds the maximum of {MAX_RANK}")
        if any(n == 0 for n in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = np.ascontiguousarray(arr, dtype=current_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

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
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label})"

    def backward(self) -> None:
        backward(self)


def make_result(
    data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn
) -> Tensor:
    """Wrap an op's float64 result and record it on the tape if needed."""
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every leaf that requires a gradient.

    Gradients accumulate into existing buffers, as with repeated calls.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward called on a tensor that does not require grad")

    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=np.float64)}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            acc = g.astype(node.data.dtype)
            node.grad = acc if node.grad is None else node.grad + acc
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
