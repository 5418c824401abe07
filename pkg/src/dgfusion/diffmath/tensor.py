"""Tensor and tape for the reverse-mode engine.

Every forward op builds a new :class:`Tensor` whose ``_parents`` point at its
inputs and whose ``_backward`` closure maps the output gradient to input
gradients. :class:`Tape` linearises that graph into a reverse topological
order for :func:`backward`.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ContractViolation(ValueError):
    """Raised when an op is called outside its shape or argument contract."""


class DomainError(ArithmeticError):
    """Raised for log of non-positive values or division by zero."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf from finite inputs."""


_local = threading.local()


def _counter() -> list[int]:
    c = getattr(_local, "counter", None)
    if c is None:
        c = _local.counter = [0]
    return c


def op_count() -> int:
    """Number of ops executed on this thread since start (or last reset)."""
    return _counter()[0]


def reset_op_count() -> None:
    _counter()[0] = 0


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


class no_grad:
    """Context manager that stops graph recording on the current thread."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _local.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _local.grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _result(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
        op: str,
    ) -> "Tensor":
        _counter()[0] += 1
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"{op} produced non-finite values")
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=DTYPE)
        out.grad = None
        out.name = None
        out.op = op
        track = _grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- array protocol ---------------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operator sugar (implemented in ops) -------------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.reduce("max", self, axis, keepdims)


def _raise_item(t: Tensor):
    raise ContractViolation(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Reverse-topologically ordered record of the ops reachable from a root.

    ``nodes`` lists tensors in forward execution order; backward walks it in
    reverse, touching every node exactly once.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
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
            for p in reversed(node._parents):
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    @property
    def ops(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(n.op, n.shape) for n in self.nodes]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise ContractViolation(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractViolation("backward root is not on a tape (no input requires grad)")
    tape = Tape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    return tape


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
