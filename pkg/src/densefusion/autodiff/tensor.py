"""Tensor and tape for reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded on it in
execution order. Outside a tape, ops compute values only, which is the fast
path used for inference.
"""
from __future__ import annotations

import threading

import numpy as np

from ..exceptions import DisconnectedGraph, NonScalarLoss

_state = threading.local()


def active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward_fn = None
        self.op = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return self.backward_fn is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" op={self.op}" if self.op else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; the ops module owns the definitions
    def __add__(self, other):
        from .ops import add
        return add(self, other)

    def __sub__(self, other):
        from .ops import sub
        return sub(self, other)

    def __mul__(self, other):
        from .ops import mul
        return mul(self, other)

    def __neg__(self):
        from .ops import scale
        return scale(self, -1.0)

    def __matmul__(self, other):
        from .ops import matmul
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nesting is allowed and the innermost tape wins.
    """

    def __init__(self):
        self.nodes = []
        self._index = {}
        self.consumed = False

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out: Tensor):
        self._index[id(out)] = len(self.nodes)
        self.nodes.append(out)

    def contains(self, t: Tensor) -> bool:
        i = self._index.get(id(t))
        return i is not None and self.nodes[i] is t

    def reset(self):
        self.nodes = []
        self._index = {}
        self.consumed = False


def record(out_data, parents, backward_fn, op):
    """Wrap ``out_data`` in a Tensor, attaching ``backward_fn`` when a tape is live.

    ``backward_fn(grad_out)`` returns one gradient (or None) per parent.
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is None:
        return out
    if not any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        return out
    out.requires_grad = True
    out.parents = tuple(parents)
    out.backward_fn = backward_fn
    out.op = op
    tape.record(out)
    return out


def backward(loss: Tensor, tape: Tape):
    """Backpropagate ``loss`` through ``tape``.

    Leaf gradients are accumulated into ``.grad`` and also returned as a
    list of ``(leaf, grad)`` pairs in first-reached order.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.data.shape}")
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward(); call reset() first")
    if loss.is_leaf:
        if not loss.requires_grad:
            raise DisconnectedGraph("loss does not depend on any tensor requiring gradients")
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        tape.consumed = True
        return [(loss, loss.grad)]
    if not tape.contains(loss):
        raise DisconnectedGraph("loss was not produced on this tape")

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    stop = tape._index[id(loss)]
    for node in reversed(tape.nodes[: stop + 1]):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                continue
            if parent.is_leaf:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                leaves[id(parent)] = parent
            else:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    tape.consumed = True
    return [(leaf, leaf.grad) for leaf in leaves.values()]
