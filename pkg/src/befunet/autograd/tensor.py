"""Dense tensor with reverse-mode automatic differentiation.

Every differentiable op records its parents and a closure that maps the
output gradient to parent gradients. Nothing is recorded globally: the
tape for one backward pass is assembled from the graph hanging off the
loss (:meth:`Tape.from_root`) and discarded once gradients are filled.
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = contextvars.ContextVar("befunet_grad_enabled", default=True)
_COUNTERS: contextvars.ContextVar[tuple["OpCounter", ...]] = contextvars.ContextVar(
    "befunet_op_counters", default=()
)
_DEFAULT_DTYPE = [np.float64]


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""


class ContractError(RuntimeError):
    """A documented precondition was violated."""


def set_default_dtype(dtype) -> None:
    _DEFAULT_DTYPE[0] = np.dtype(dtype).type


def get_default_dtype():
    return _DEFAULT_DTYPE[0]


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


@contextlib.contextmanager
def no_grad():
    """Run ops without recording graph edges."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


class OpCounter:
    """Counts multiply-adds performed by contraction ops (matmul, conv).

    Used as a context manager; counters nest, and every active counter
    sees every op executed inside it.
    """

    def __init__(self) -> None:
        self.multiply_adds = 0
        self._token = None

    def add(self, n: int) -> None:
        if n < 0:
            raise ContractError("multiply-add count must be non-negative")
        self.multiply_adds += int(n)

    def __enter__(self) -> "OpCounter":
        self._token = _COUNTERS.set(_COUNTERS.get() + (self,))
        return self

    def __exit__(self, *exc) -> None:
        _COUNTERS.reset(self._token)
        self._token = None


def count_multiply_adds(n: int) -> None:
    for counter in _COUNTERS.get():
        counter.add(n)


class Tensor:
    """Numpy-backed array that can take part in a differentiable graph.

    ``data`` is always a numpy array; ``grad`` is ``None`` until a backward
    pass reaches the tensor (leaves only, unless ``retain_grad`` is set).
    """

    __array_priority__ = 100
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_retain")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(get_default_dtype())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._retain = False

    # -- basic properties -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, params: Iterable["Tensor"] | None = None) -> None:
        backward(self, params)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = get_default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def make_result(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap an op output, wiring it into the graph when gradients are needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._retain = False
    if _GRAD_ENABLED.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


class Tape:
    """Ordered record of the ops between the leaves and one root.

    ``nodes`` is topologically sorted: every node appears after all of its
    inputs.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        # iterative DFS; graphs are deep enough to hit the recursion limit
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
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def run(self, root: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node._retain:
                node.grad = g.copy() if node.grad is None else node.grad + g
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(
                        f"backward produced gradient {pg.shape} for operand {parent.shape}"
                    )
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def clear(self) -> None:
        for node in self.nodes:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
        self.nodes = []


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    ``params`` (optional) receive zero gradients when the loss does not
    depend on them, so optimizers always see a gradient buffer.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        tape = Tape.from_root(loss)
        tape.run(loss)
        tape.clear()
    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)
