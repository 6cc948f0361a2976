"""Tape-recording tensor for reverse-mode differentiation.

Every op builds a new :class:`Tensor` holding its forward value, references to
its inputs and a closure that pushes the output gradient back into them.
:meth:`Tensor.backward` walks the graph once in reverse topological order.
"""
from __future__ import annotations

import numpy as np

from ..errors import RejectedInput


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, op="leaf", parents=(), backward=None):
        self.data = np.array(data, dtype=np.float64) if op == "leaf" else data
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        # gradients may alias each other (add passes one array to both parents),
        # so they are never updated in place
        g = np.asarray(g, dtype=np.float64)
        self.grad = g if self.grad is None else self.grad + g

    def backward(self):
        """Populate ``.grad`` on every tensor reachable from this scalar."""
        if self.data.size != 1:
            raise RejectedInput(f"backward needs a scalar loss, got shape {self.data.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        for node in order:
            if node is not self and node.op != "leaf":
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape}, op={self.op})"

    # arithmetic sugar; all routes go through ops
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
        return ops.pointwise_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def make_node(data, parents, op, backward) -> Tensor:
    """Internal: wrap an op result; gradients are tracked only if some input needs them."""
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, op=op, parents=tuple(parents) if needs else (), backward=backward if needs else None)
