from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from capsattack.enums import Precision
from capsattack.errors import ContractError

__all__ = (
    "Tensor",
    "Parameter",
    "Node",
    "Tape",
    "backward",
    "no_grad",
    "is_grad_enabled",
    "as_tensor",
    "dtype_of",
)

DTYPES = {Precision.single: np.float32, Precision.double: np.float64}

ArrayLike = Union[np.ndarray, float, int, Sequence]
GradFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _GradState(threading.local):
    def __init__(self) -> None:
        self.enabled = True


_grad_state = _GradState()


def is_grad_enabled() -> bool:
    return _grad_state.enabled


@contextmanager
def no_grad():
    """Run operations without recording them, e.g. for evaluation passes."""
    previous = _grad_state.enabled
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def dtype_of(precision: Union[Precision, str]) -> type:
    return DTYPES[Precision(precision)]


class Tensor:
    """
    A dense n-dimensional array with optional gradient accumulation.

    The scalars live in a C-ordered (row-major) numpy buffer. Tensors produced by
    an operation on at least one tensor that requires gradients carry the `node`
    that created them; leaves have `node = None`.
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        precision: Optional[Union[Precision, str]] = None,
    ) -> None:
        array = np.asarray(data)
        if precision is not None:
            dtype = dtype_of(precision)
        elif isinstance(data, (np.ndarray, np.generic)) and array.dtype in (np.float32, np.float64):
            dtype = array.dtype
        else:
            dtype = np.float32

        self.data: np.ndarray = np.ascontiguousarray(array, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    def __repr__(self):
        return f"<capsattack.Tensor shape={self.shape} precision={self.precision.value} requires_grad={self.requires_grad}>"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def precision(self) -> Precision:
        return Precision.double if self.data.dtype == np.float64 else Precision.single

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    # The arithmetic operators are thin wrappers over capsattack.ops.

    def __add__(self, other):
        from capsattack import ops

        return ops.add(self, other)

    def __radd__(self, other):
        from capsattack import ops

        return ops.add(other, self)

    def __sub__(self, other):
        from capsattack import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from capsattack import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from capsattack import ops

        return ops.mul(self, other)

    def __rmul__(self, other):
        from capsattack import ops

        return ops.mul(other, self)

    def __truediv__(self, other):
        from capsattack import ops

        return ops.div(self, other)

    def __neg__(self):
        from capsattack import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from capsattack import ops

        return ops.matmul(self, other)

    def reshape(self, *shape: int) -> "Tensor":
        from capsattack import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        from capsattack import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        from capsattack import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A named, trainable leaf tensor. Names are unique within a model."""

    def __init__(self, name: str, data: ArrayLike, precision=None) -> None:
        super().__init__(data, requires_grad=True, precision=precision)
        self.name = name

    def __repr__(self):
        return f"<capsattack.Parameter name={self.name} shape={self.shape}>"


def as_tensor(value: Union[Tensor, ArrayLike], like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if like is not None:
        return Tensor(np.asarray(value, dtype=like.data.dtype))
    return Tensor(value)


class Node:
    """
    One executed operation: its inputs, its output and the rule mapping the
    output gradient to one gradient per input (None where no gradient flows).
    """

    __slots__ = ("name", "inputs", "output_id", "grad_fn")

    def __init__(self, name: str, inputs: Tuple[Tensor, ...], output: Tensor, grad_fn: GradFn) -> None:
        self.name = name
        self.inputs = inputs
        self.output_id = id(output)
        self.grad_fn = grad_fn

    def __repr__(self):
        return f"<capsattack.Node {self.name}>"


def record(name: str, data: np.ndarray, inputs: Sequence[Tensor], grad_fn: GradFn) -> Tensor:
    """Wrap `data` in a Tensor, attaching a node when a gradient can flow."""
    out = Tensor(data)
    if _grad_state.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(name, tuple(inputs), out, grad_fn)
    return out


class Tape:
    """
    The ordered record of the operations leading to a tensor.

    A tape is traced from the loss every time it is needed, so it always
    reflects the current forward pass. Nodes are kept in topological order:
    an operation's inputs are produced before it.
    """

    def __init__(self, nodes: List[Node]) -> None:
        self.nodes = nodes

    def __repr__(self):
        return f"<capsattack.Tape nodes={len(self.nodes)}>"

    def __len__(self):
        return len(self.nodes)

    @property
    def op_names(self) -> List[str]:
        return [node.name for node in self.nodes]

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        nodes: List[Node] = []
        visited = set()
        stack = [(loss, False)]

        # iterative post-order walk, each node is emitted once
        while stack:
            tensor, children_done = stack.pop()
            node = tensor.node
            if node is None or id(node) in visited and not children_done:
                continue
            if children_done:
                if id(node) not in visited:
                    visited.add(id(node))
                    nodes.append(node)
                continue
            stack.append((tensor, True))
            for parent in node.inputs:
                if parent.node is not None and id(parent.node) not in visited:
                    stack.append((parent, False))

        return cls(nodes)

    def backward(self, loss: Tensor, inputs: Optional[Sequence[Tensor]] = None) -> None:
        wanted = None if inputs is None else {id(t) for t in inputs}
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        if loss.is_leaf:
            loss.accumulate(grads[id(loss)])
            return

        for node in reversed(self.nodes):
            grad = grads.pop(node.output_id, None)
            if grad is None:
                continue
            input_grads = node.grad_fn(grad)
            for tensor, g in zip(node.inputs, input_grads):
                if g is None or not tensor.requires_grad:
                    continue
                if tensor.is_leaf:
                    if wanted is None or id(tensor) in wanted:
                        tensor.accumulate(g)
                elif id(tensor) in grads:
                    grads[id(tensor)] = grads[id(tensor)] + g
                else:
                    grads[id(tensor)] = g


def backward(loss: Tensor, inputs: Optional[Sequence[Tensor]] = None) -> None:
    """
    Populate `grad` of every leaf that requires gradients with d(loss)/d(leaf).

    Repeated calls accumulate into existing buffers. With `inputs`, only those
    leaves receive gradients; the others, model parameters typically, are left
    untouched.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss was not produced from any tensor that requires gradients")

    Tape.from_loss(loss).backward(loss, inputs)
