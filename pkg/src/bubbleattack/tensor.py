"""Dense tensors with an explicit differentiation tape and selectable
floating-point semantics.

Three arithmetic kinds are supported:

* ``Full64``      -- IEEE binary64 throughout.
* ``Standard32``  -- IEEE binary32 (numpy float32), optionally flushing
  subnormal results to zero.
* ``Reduced32``   -- binary32 storage, but every operand and result is
  rounded to a 10-bit mantissa (TF32-like) with round-to-nearest-even.

Operations are recorded on the innermost active :class:`Tape`. Outside of a
tape nothing is recorded, which is how inference and attack bookkeeping
avoid building graphs.
"""
from __future__ import annotations

import enum
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels

MIN_NORMAL32 = 2.0 ** -126


class Kind(enum.Enum):
    FULL64 = "f64"
    STANDARD32 = "f32"
    REDUCED32 = "tf32"


@dataclass(frozen=True)
class PrecisionMode:
    kind: Kind = Kind.FULL64
    flush_to_zero: bool = False

    @property
    def dtype(self):
        return np.float64 if self.kind is Kind.FULL64 else np.float32

    @property
    def name(self) -> str:
        return self.kind.value + ("+ftz" if self.flush_to_zero and self.kind is not Kind.FULL64 else "")

    @classmethod
    def parse(cls, text: str, flush_to_zero: bool = False) -> "PrecisionMode":
        try:
            return cls(Kind(text), flush_to_zero)
        except ValueError:
            raise ValueError(f"unknown precision {text!r}; expected one of f64, f32, tf32") from None

    def finish(self, a):
        """Bring a freshly computed result into this mode's value set."""
        if self.kind is Kind.FULL64:
            return np.asarray(a, dtype=np.float64)
        if self.kind is Kind.REDUCED32:
            a = kernels.round_reduced(a).astype(np.float32)
        else:
            a = np.asarray(a, dtype=np.float32)
        if self.flush_to_zero:
            a = np.where(np.abs(a) < MIN_NORMAL32, np.float32(0.0), a)
        return a

    def operand(self, a):
        """Operand conditioning applied before multiply/accumulate."""
        if self.kind is Kind.REDUCED32:
            return kernels.round_reduced(a).astype(np.float32)
        return np.asarray(a, dtype=self.dtype)

    def matmul(self, a, b):
        return self.finish(self.operand(a) @ self.operand(b))


FULL64 = PrecisionMode(Kind.FULL64)
STANDARD32 = PrecisionMode(Kind.STANDARD32)
REDUCED32 = PrecisionMode(Kind.REDUCED32)


def round_reduced(x):
    """Round to a 10-bit mantissa (ties to even) within the binary32 exponent range.

    Subnormals keep the same absolute grid spacing (2**-136), so values below
    2**-137 round to zero.
    """
    out = kernels.round_reduced(np.asarray(x, dtype=np.float64))
    return float(out) if np.ndim(x) == 0 else out


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "mode", "_node")

    def __init__(self, data, requires_grad: bool = False, mode: PrecisionMode = FULL64):
        self.mode = mode
        self.data = mode.finish(np.array(data, dtype=np.float64 if mode.kind is Kind.FULL64 else None))
        self.requires_grad = requires_grad
        self._node = None

    @classmethod
    def _wrap(cls, data, mode):
        t = cls.__new__(cls)
        t.data = data
        t.mode = mode
        t.requires_grad = False
        t._node = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, mode={self.mode.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        from .ops import add
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from .ops import sub
        return sub(self, other)

    def __mul__(self, other):
        from .ops import mul
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from .ops import mul
        return mul(self, -1.0)

    def sum(self):
        from .ops import tsum
        return tsum(self)


class Node:
    __slots__ = ("index", "inputs", "output", "backward", "kind", "saved")

    def __init__(self, index, inputs, output, backward, kind, saved=None):
        self.index = index
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.kind = kind
        self.saved = saved


_state = threading.local()


def _stack():
    st = getattr(_state, "stack", None)
    if st is None:
        st = _state.stack = []
    return st


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; operations on tensors that require gradients
    are appended in execution order, which is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        st = _stack()
        if not st or st[-1] is not self:
            raise TapeError("tape stack corrupted")
        st.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor):
        return backward(loss, self)


def current_tape() -> Tape | None:
    st = _stack()
    return st[-1] if st else None


def tracked(t) -> bool:
    return isinstance(t, Tensor) and (t.requires_grad or t._node is not None)


def record(inputs: Sequence[Tensor], output: Tensor,
           backward_fn: Callable, kind: str, saved=None) -> Tensor:
    """Attach ``output`` to the active tape when any input is tracked.

    ``backward_fn(grad, needs)`` returns one gradient (or None) per input;
    ``needs[i]`` says whether input i wants one.
    """
    tape = current_tape()
    if tape is None or not any(tracked(t) for t in inputs):
        return output
    node = Node(len(tape.nodes), tuple(inputs), output, backward_fn, kind, saved)
    tape.nodes.append(node)
    output._node = node
    return output


class Gradients(dict):
    """Mapping from leaf tensor to its gradient array (identity-keyed)."""

    def __getitem__(self, t):
        return dict.__getitem__(self, id(t))[1]

    def __contains__(self, t):
        return dict.__contains__(self, id(t))

    def get(self, t, default=None):
        v = dict.get(self, id(t))
        return default if v is None else v[1]

    def leaves(self):
        return [v[0] for v in dict.values(self)]


def backward(loss: Tensor, tape: Tape | None = None) -> Gradients:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns the gradient of ``loss`` with respect to every ``requires_grad``
    leaf reachable from it. Gradients are accumulated in each node's own
    precision mode, so exact zeros propagate as exact zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if tape is None:
        tape = current_tape()
    if tape is None:
        raise TapeError("no tape recorded for this loss")
    mode = loss.mode
    pending: dict[int, np.ndarray] = {id(loss): mode.finish(np.ones_like(loss.data))}
    out = Gradients()
    if loss._node is None:
        if loss.requires_grad:
            dict.__setitem__(out, id(loss), (loss, pending[id(loss)]))
        return out
    if loss._node.index >= len(tape.nodes) or tape.nodes[loss._node.index] is not loss._node:
        raise TapeError("loss was not recorded on this tape")

    for node in reversed(tape.nodes[: loss._node.index + 1]):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        needs = tuple(tracked(t) for t in node.inputs)
        grads = node.backward(g, needs)
        for t, gi, need in zip(node.inputs, grads, needs):
            if not need or gi is None:
                continue
            if t._node is not None:
                if t._node.index >= node.index:
                    raise TapeError(f"cycle: node {node.index} ({node.kind}) consumes a later result")
                key = id(t)
                pending[key] = gi if key not in pending else t.mode.finish(pending[key] + gi)
            else:
                key = id(t)
                if dict.__contains__(out, key):
                    prev = dict.__getitem__(out, key)[1]
                    dict.__setitem__(out, key, (t, t.mode.finish(prev + gi)))
                else:
                    dict.__setitem__(out, key, (t, gi))
    return out
