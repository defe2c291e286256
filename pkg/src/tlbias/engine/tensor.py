"""Tensor type and the reverse-mode tape.

A differentiable op produces its output together with a :class:`Node` that
remembers the inputs and a closure mapping the output gradient to input
gradients. :class:`Tape` is the topologically ordered list of those nodes
reachable from a loss; replaying it backward accumulates ``.grad`` on the
leaf tensors that have ``requires_grad`` set.
"""

from __future__ import annotations

import contextlib
import weakref
from typing import Callable, Sequence

import numpy as np

from ..errors import UsageError

DTYPES = {"f32": np.float32, "f64": np.float64}

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable node recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def as_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            dtype = DTYPES[dtype]
        except KeyError:
            raise UsageError(f"unknown dtype {dtype!r}; expected 'f32' or 'f64'") from None
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise UsageError(f"unsupported dtype {dt}; tensors are float32 or float64")
    return dt


class Tensor:
    """Dense float array with optional gradient tracking.

    Parameters
    ----------
    data : array_like
        Values; converted (without copying when possible) to a C-contiguous
        float32/float64 array.
    requires_grad : bool
        Mark as a leaf whose gradient is accumulated by :func:`backward`.
    dtype : {"f32", "f64"} or numpy dtype, optional
        Defaults to the input's float dtype, or float32 otherwise.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        self.data = np.asarray(arr, dtype=as_dtype(dtype), order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


class Node:
    """One recorded op: inputs, output, and the gradient closure.

    The output is held weakly; a strong reference would form a cycle
    (output -> node -> output) that keeps whole graphs alive until the
    cyclic collector runs.
    """

    __slots__ = ("op", "inputs", "_output", "grad_fn", "saved")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 grad_fn: Callable, saved: dict | None = None):
        self.op = op
        self.inputs = tuple(inputs)
        self._output = weakref.ref(output)
        self.grad_fn = grad_fn
        self.saved = saved or {}

    @property
    def output(self) -> Tensor | None:
        return self._output()


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
           grad_fn: Callable, saved: dict | None = None) -> Tensor:
    """Wrap ``out_data`` in a Tensor, attaching a Node if any input is tracked.

    ``grad_fn(g)`` must return one gradient (or None) per input.
    """
    out = Tensor(out_data, dtype=out_data.dtype)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, out, grad_fn, saved)
    return out


class Tape:
    """Topologically ordered nodes reachable from a loss tensor."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[Node] = []
        seen: set[int] = set()
        if loss.node is None:
            return cls(order)
        # iterative post-order DFS; deep graphs would overflow recursion
        stack = [(loss.node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for inp in reversed(node.inputs):
                if inp.node is not None and id(inp.node) not in seen:
                    stack.append((inp.node, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1 or loss.ndim != 0:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise UsageError("loss does not depend on any tensor with requires_grad")
        seed = np.ones((), dtype=loss.dtype)
        if loss.node is None:
            _accumulate_leaf(loss, seed)
            return
        if not self.nodes or self.nodes[-1] is not loss.node:
            raise UsageError("loss is not the final node of this tape")
        pending: dict[int, np.ndarray] = {id(loss): seed}
        for node in reversed(self.nodes):
            out = node.output
            g = None if out is None else pending.pop(id(out), None)
            if g is None:
                continue
            grads = node.grad_fn(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node is None:
                    _accumulate_leaf(inp, gi)
                elif id(inp) in pending:
                    pending[id(inp)] = pending[id(inp)] + gi
                else:
                    pending[id(inp)] = gi


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype)
    if g.shape != t.shape:
        g = np.broadcast_to(g, t.shape)
    # accumulate; callers zero between steps
    t.grad = np.array(g, dtype=t.dtype) if t.grad is None else t.grad + g


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf.

    Gradients add onto existing ``.grad`` buffers; zero them between steps.
    Returns the tape that was replayed.
    """
    if tape is None:
        tape = Tape.from_loss(loss)
    tape.backward(loss)
    return tape
