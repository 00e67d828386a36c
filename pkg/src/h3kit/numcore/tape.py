"""Tensor values and the reverse-mode tape that records them."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand dimensions do not line up."""


class Tensor:
    """An immutable array value, optionally tracked on a :class:`Tape`.

    ``idx`` is the node index on ``tape``; untracked constants have ``idx=None``.
    Values are real f64 except for intermediates of SSM kernel generation,
    which may be complex128.
    """

    __slots__ = ("data", "tape", "idx", "name")
    __array_priority__ = 100

    def __init__(self, data, tape: Optional["Tape"] = None, idx: Optional[int] = None, name=None):
        self.data = data
        self.tape = tape
        self.idx = idx
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.idx is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar; the implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


class Tape:
    """Ordered record of operations for one forward pass.

    Nodes are appended in execution order, so every node's inputs precede it.
    With ``grad=False`` nothing is recorded and ops act as plain numpy.
    """

    def __init__(self, grad: bool = True):
        self.grad = grad
        self._parents: list[tuple] = []
        self._vjps: list[Optional[Callable]] = []
        self._ops: list[str] = []

    def __len__(self):
        return len(self._parents)

    def param(self, value, name: Optional[str] = None) -> Tensor:
        """Register a leaf whose gradient is wanted."""
        value = np.asarray(value)
        if not self.grad:
            return Tensor(value, self, None, name)
        self._parents.append(())
        self._vjps.append(None)
        self._ops.append("leaf")
        return Tensor(value, self, len(self._parents) - 1, name)

    def constant(self, value) -> Tensor:
        return Tensor(np.asarray(value), self, None)

    def record(self, op: str, value, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
        """Append a node. ``vjp(g)`` returns one cotangent (or None) per input."""
        parents = tuple(t.idx for t in inputs)
        if not self.grad or all(p is None for p in parents):
            return Tensor(value, self, None)
        self._parents.append(parents)
        self._vjps.append(vjp)
        self._ops.append(op)
        return Tensor(value, self, len(self._parents) - 1)

    def backward(self, loss: Tensor) -> "Gradients":
        """Propagate d(loss)/d(node) to every recorded node, in reverse order."""
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: list = [None] * len(self._parents)
        if loss.idx is None:
            return Gradients(grads)
        grads[loss.idx] = np.ones_like(loss.data)
        for i in range(loss.idx, -1, -1):
            g = grads[i]
            vjp = self._vjps[i]
            if g is None or vjp is None:
                continue
            for p, gp in zip(self._parents[i], vjp(g)):
                if p is None or gp is None:
                    continue
                grads[p] = gp if grads[p] is None else grads[p] + gp
            # interior cotangents are no longer needed
            grads[i] = None if self._parents[i] else g
        return Gradients(grads)

    def nodes(self) -> list[tuple[str, tuple]]:
        """(op name, parent indices) for each node, in insertion order."""
        return list(zip(self._ops, self._parents))


class Gradients:
    """Leaf gradients from one backward pass; unused leaves read as exact zeros."""

    def __init__(self, grads: list):
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = None if t.idx is None else self._grads[t.idx]
        if g is None:
            return np.zeros_like(t.data)
        if not np.iscomplexobj(t.data) and np.iscomplexobj(g):
            g = g.real
        return g
