"""Dense tensors with define-by-run reverse-mode differentiation.

Every operation on a :class:`Tensor` records its parents and a closure that
maps the output gradient to one gradient per parent. The graph is rebuilt on
every forward pass and walked in reverse topological order by
:func:`backward`.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import (
    Callable,
    Iterable,
    Iterator,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError, NonFiniteError

logger = logging.getLogger(__name__)

GradFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
Operand = Union["Tensor", np.ndarray, float, int]

_default_dtype: np.dtype = np.dtype(np.float32)


def get_default_dtype() -> np.dtype:
    """Return the float dtype used for new tensors."""
    return _default_dtype


def set_default_dtype(dtype: Union[np.dtype, type, str]) -> None:
    """Set the float dtype used for new tensors (float32 or float64)."""
    global _default_dtype
    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"Unsupported tensor precision: {resolved}")
    _default_dtype = resolved


@contextlib.contextmanager
def precision(dtype: Union[np.dtype, type, str]) -> Iterator[None]:
    """Temporarily switch the default tensor precision."""
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    previous = Tensor._no_grad
    Tensor._no_grad = True
    try:
        yield
    finally:
        Tensor._no_grad = previous


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"Non-finite values produced by '{op}'")


class Tensor:
    """N-dimensional float array with an optional gradient slot."""

    _no_grad = False

    def __init__(
        self,
        data: Union[np.ndarray, float, int, Sequence[float]],
        requires_grad: bool = False,
        name: str = "",
    ) -> None:
        self.data: np.ndarray = np.array(data, dtype=get_default_dtype())
        _check_finite(self.data, name or "leaf")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.op = "leaf"
        self._parents: Tuple[Tensor, ...] = ()
        self._grad_fn: Optional[GradFn] = None

    @classmethod
    def _from_op(
        cls,
        data: np.ndarray,
        parents: Tuple["Tensor", ...],
        grad_fn: GradFn,
        op: str,
    ) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data)
        _check_finite(out.data, op)
        out.grad = None
        out.name = ""
        out.op = op
        track = not Tensor._no_grad and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._grad_fn = grad_fn if track else None
        return out

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        """Return a copy of the underlying array."""
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Return a leaf sharing this tensor's values."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.name = self.name
        out.op = "leaf"
        out._parents = ()
        out._grad_fn = None
        return out

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        suffix = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{suffix})"

    def backward(self) -> "ComputationGraph":
        """Back-propagate from this scalar tensor."""
        return backward(self)

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other: Operand) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
            return unbroadcast(g, a_shape), unbroadcast(g, b_shape)

        return Tensor._from_op(
            self.data + other.data, (self, other), grad_fn, "add"
        )

    def __radd__(self, other: Operand) -> "Tensor":
        return as_tensor(other) + self

    def __sub__(self, other: Operand) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
            return unbroadcast(g, a_shape), unbroadcast(-g, b_shape)

        return Tensor._from_op(
            self.data - other.data, (self, other), grad_fn, "sub"
        )

    def __rsub__(self, other: Operand) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other: Operand) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data

        def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
            return unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)

        return Tensor._from_op(a * b, (self, other), grad_fn, "mul")

    def __rmul__(self, other: Operand) -> "Tensor":
        return as_tensor(other) * self

    def __truediv__(self, other: Operand) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data

        def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
            return (
                unbroadcast(g / b, a.shape),
                unbroadcast(-g * a / (b * b), b.shape),
            )

        return Tensor._from_op(a / b, (self, other), grad_fn, "div")

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
            return (-g,)

        return Tensor._from_op(-self.data, (self,), grad_fn, "neg")

    def __pow__(self, power: float) -> "Tensor":
        x = self.data

        def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
            return (power * x ** (power - 1) * g,)

        return Tensor._from_op(x**power, (self,), grad_fn, f"pow{power}")

    def __matmul__(self, other: Operand) -> "Tensor":
        return matmul(self, as_tensor(other))

    def __getitem__(self, index: object) -> "Tensor":
        shape, dtype = self.shape, self.data.dtype

        def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._from_op(self.data[index], (self,), grad_fn, "getitem")

    # -- reductions ----------------------------------------------------

    def sum(
        self,
        axis: Union[int, Tuple[int, ...], None] = None,
        keepdims: bool = False,
    ) -> "Tensor":
        shape = self.shape

        def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._from_op(
            self.data.sum(axis=axis, keepdims=keepdims),
            (self,),
            grad_fn,
            "sum",
        )

    def mean(
        self,
        axis: Union[int, Tuple[int, ...], None] = None,
        keepdims: bool = False,
    ) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    # -- shape ---------------------------------------------------------

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        try:
            data = self.data.reshape(shape)
        except ValueError as e:
            raise DimensionError(
                f"Cannot reshape {original} into {tuple(shape)}"
            ) from e

        def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
            return (g.reshape(original),)

        return Tensor._from_op(data, (self,), grad_fn, "reshape")

    def transpose(self, *axes: int) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))

        def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
            return (g.transpose(inverse),)

        return Tensor._from_op(
            self.data.transpose(axes), (self,), grad_fn, "transpose"
        )

    def swap_last(self) -> "Tensor":
        """Swap the last two axes."""
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(*axes)

    # -- elementwise ---------------------------------------------------

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
            return (g * out_data,)

        return Tensor._from_op(out_data, (self,), grad_fn, "exp")

    def log(self) -> "Tensor":
        x = self.data

        def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
            return (g / x,)

        return Tensor._from_op(np.log(x), (self,), grad_fn, "log")

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)

        def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
            return (g / (2.0 * out_data),)

        return Tensor._from_op(out_data, (self,), grad_fn, "sqrt")

    def relu(self) -> "Tensor":
        mask = self.data > 0

        def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
            return (g * mask,)

        return Tensor._from_op(self.data * mask, (self,), grad_fn, "relu")

    def sigmoid(self) -> "Tensor":
        out_data = expit(self.data)

        def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
            return (g * out_data * (1.0 - out_data),)

        return Tensor._from_op(out_data, (self,), grad_fn, "sigmoid")


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(
        self,
        data: Union[np.ndarray, float, Sequence[float]],
        name: str = "",
    ) -> None:
        super().__init__(data, requires_grad=True, name=name)


def as_tensor(value: Operand) -> Tensor:
    """Wrap constants as non-differentiable tensors."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    a_data, b_data = a.data, b.data

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        grad_a = grad_b = None
        if a.requires_grad:
            grad_a = unbroadcast(g @ np.swapaxes(b_data, -1, -2), a.shape)
        if b.requires_grad:
            grad_b = unbroadcast(np.swapaxes(a_data, -1, -2) @ g, b.shape)
        return grad_a, grad_b

    return Tensor._from_op(a_data @ b_data, (a, b), grad_fn, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate tensors along ``axis`` (channel concatenation C(.))."""
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors:
        other = [s for i, s in enumerate(t.shape) if i != axis]
        first = [s for i, s in enumerate(tensors[0].shape) if i != axis]
        if t.ndim != ndim or other != first:
            raise DimensionError(
                "concat shape mismatch: "
                + ", ".join(str(x.shape) for x in tensors)
            )
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        grad_fn,
        "concat",
    )


def broadcast_to(tensor: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Broadcast ``tensor`` to ``shape``; gradients are summed back."""
    original = tensor.shape
    try:
        data = np.broadcast_to(tensor.data, shape)
    except ValueError as e:
        raise DimensionError(
            f"Cannot broadcast {original} to {tuple(shape)}"
        ) from e

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (unbroadcast(g, original),)

    return Tensor._from_op(data, (tensor,), grad_fn, "broadcast")


def relu(x: Tensor) -> Tensor:
    return x.relu()


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


@dataclass
class ComputationGraph:
    """Topologically ordered record of one forward pass."""

    nodes: List[Tensor] = field(default_factory=list)
    parameters: List[Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)


def trace(root: Tensor) -> ComputationGraph:
    """Collect the nodes reachable from ``root``, parents first."""
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
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    parameters = [n for n in order if n.is_leaf and n.requires_grad]
    return ComputationGraph(nodes=order, parameters=parameters)


def backward(
    root: Tensor, parameters: Optional[Iterable[Tensor]] = None
) -> ComputationGraph:
    """Populate ``grad`` on every node of ``root``'s graph.

    Leaf gradients accumulate across calls. Tensors listed in
    ``parameters`` that ``root`` does not depend on receive zeros.
    """
    if root.size != 1:
        raise ContractError(
            f"backward needs a scalar root, got shape {root.shape}"
        )
    if Tensor._no_grad:
        raise ContractError("backward called inside no_grad")
    graph = trace(root)
    root.grad = np.ones_like(root.data)
    for node in reversed(graph.nodes):
        if node._grad_fn is None or node.grad is None:
            continue
        parent_grads = node._grad_fn(node.grad)
        for parent, grad in zip(node._parents, parent_grads):
            if grad is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(grad, dtype=parent.data.dtype)
            else:
                parent.grad = parent.grad + grad
    for param in parameters or ():
        if param.grad is None:
            param.grad = np.zeros_like(param.data)
    logger.debug("backward over %d nodes", len(graph.nodes))
    return graph
