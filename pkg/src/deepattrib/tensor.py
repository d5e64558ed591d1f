"""Immutable tensors and a tape for reverse-mode differentiation.

A :class:`Tape` records every primitive applied while it is active (``with
Tape() as tape:``) and whose inputs depend on a watched leaf. Nodes are
appended in execution order, so the node list is already topologically
sorted and :func:`backward` simply walks it in reverse.

Tensors default to float32. float64 tensors are accepted everywhere and
preserved through every primitive; the gradient checker relies on that.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from deepattrib.primitives import get_rule

DEFAULT_DTYPE = np.float32


class DetachedNodeError(ValueError):
    """The requested tensor is not recorded on the tape."""


class NonScalarOutputError(ValueError):
    pass


class Tensor:
    """Read-only n-d array of floats with an optional tape binding."""

    __slots__ = ("data", "node", "tape")

    def __init__(self, data: Any, dtype: Any = None) -> None:
        if isinstance(data, Tensor):
            data = data.data
            dtype = dtype or data.dtype
        if dtype is None:
            dtype = DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype)  # always a private copy
        arr.setflags(write=False)
        self.data = arr
        self.node: int | None = None
        self.tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr.setflags(write=False)
        t.data = arr
        t.node = None
        t.tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar, all routed through primitives
    def __add__(self, other):
        return apply_primitive("add", [self, _as_tensor(other, self)])

    def __sub__(self, other):
        return apply_primitive("sub", [self, _as_tensor(other, self)])

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return apply_primitive("scale", [self], {"factor": float(other)})
        return apply_primitive("elementwise_mul", [self, _as_tensor(other, self)])

    __rmul__ = __mul__

    def __neg__(self):
        return apply_primitive("scale", [self], {"factor": -1.0})

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, other])


def _as_tensor(x: Any, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=like.dtype)


@dataclass
class Node:
    kind: str
    inputs: tuple[int | None, ...]  # None marks a constant input
    arrays: tuple[np.ndarray, ...]  # input values saved for backward
    saved: Any
    attrs: dict
    shape: tuple[int, ...]
    out: np.ndarray | None = field(default=None, repr=False)


_state = threading.local()


def _active_tapes() -> list["Tape"]:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


class Tape:
    """Ordered record of primitive applications; confined to one thread."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _active_tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _active_tapes()
        assert stack and stack[-1] is self, "tapes must be closed in LIFO order"
        stack.pop()

    def watch(self, t: Tensor) -> Tensor:
        """Register ``t`` as a leaf; returns a bound copy sharing its data."""
        out = Tensor._wrap(t.data)
        out.node = len(self.nodes)
        out.tape = self
        self.nodes.append(Node("leaf", (), (), None, {}, t.shape))
        return out

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, leaves: dict[int, np.ndarray]) -> list[np.ndarray | None]:
        """Re-run the recorded forward pass from new leaf values."""
        vals: list[np.ndarray | None] = []
        for i, node in enumerate(self.nodes):
            if node.kind == "leaf":
                vals.append(leaves[i])
                continue
            arrays = [node.arrays[k] if src is None else vals[src] for k, src in enumerate(node.inputs)]
            out, _ = get_rule(node.kind).forward(arrays, node.attrs)
            vals.append(out)
        return vals


def apply_primitive(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Evaluate one primitive and record it on the innermost active tape."""
    rule = get_rule(kind)
    attrs = attrs or {}
    if rule.arity is not None and len(inputs) != rule.arity:
        raise TypeError(f"{kind} takes {rule.arity} inputs, got {len(inputs)}")
    arrays = [t.data for t in inputs]
    if len({a.dtype for a in arrays}) > 1:
        raise TypeError(f"{kind}: mixed dtypes {[a.dtype for a in arrays]}")
    out, saved = rule.forward(arrays, attrs)
    result = Tensor._wrap(np.asarray(out))
    stack = _active_tapes()
    if stack:
        tape = stack[-1]
        srcs = tuple(t.node if t.tape is tape else None for t in inputs)
        if any(s is not None for s in srcs):
            result.node = len(tape.nodes)
            result.tape = tape
            tape.nodes.append(Node(kind, srcs, tuple(arrays), saved, attrs, result.shape, result.data))
    return result


def backward(tape: Tape, output: Tensor | int) -> dict[int, Tensor]:
    """Gradients of a scalar tape node with respect to every leaf.

    Returns a map from leaf node id to a tensor of the leaf's shape. Leaves
    the output does not depend on receive zeros.
    """
    if isinstance(output, Tensor):
        if output.tape is not tape or output.node is None:
            raise DetachedNodeError("output tensor is not recorded on this tape")
        out_id = output.node
    else:
        out_id = output
    if not 0 <= out_id < len(tape.nodes):
        raise DetachedNodeError(f"node {out_id} is not on this tape")
    out_node = tape.nodes[out_id]
    if int(np.prod(out_node.shape)) != 1:
        raise NonScalarOutputError(f"backward needs a scalar output, got shape {out_node.shape}")

    dtype = out_node.out.dtype if out_node.out is not None else DEFAULT_DTYPE
    grads: dict[int, np.ndarray] = {out_id: np.ones(out_node.shape, dtype=dtype)}
    for i in range(out_id, -1, -1):
        g = grads.get(i)
        node = tape.nodes[i]
        if g is None or node.kind == "leaf":
            continue
        del grads[i]
        rule = get_rule(node.kind)
        args = (g, list(node.arrays), node.out, node.saved, node.attrs)
        if rule.partial:
            input_grads = rule.backward(*args, needs=tuple(src is not None for src in node.inputs))
        else:
            input_grads = rule.backward(*args)
        for src, gi in zip(node.inputs, input_grads):
            if src is None or gi is None:
                continue
            gi = np.asarray(gi, dtype=g.dtype)
            if src in grads:
                grads[src] = grads[src] + gi
            else:
                grads[src] = gi
    result = {}
    for i, node in enumerate(tape.nodes):
        if node.kind == "leaf":
            g = grads.get(i)
            result[i] = Tensor._wrap(np.array(g) if g is not None else np.zeros(node.shape, dtype=dtype))
    return result


def gradients(tape: Tape, output: Tensor, wrt: Iterable[Tensor]) -> list[Tensor]:
    """Convenience wrapper: gradients of ``output`` for the given watched leaves."""
    gmap = backward(tape, output)
    out = []
    for t in wrt:
        if t.tape is not tape or t.node not in gmap:
            raise DetachedNodeError("gradient requested for a tensor that is not a watched leaf")
        out.append(gmap[t.node])
    return out
