"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: every operation eagerly computes its numpy
result and, when any input is differentiable, records the parent tensors plus
a local gradient rule on the output node. ``backward`` walks the recorded
graph once, in reverse topological order, accumulating gradients into every
differentiable tensor it reaches. The graph is consumed by the walk; a second
backward through the same nodes raises ``TapeError``.

Broadcasting is intentionally restricted: binary operations accept equal
shapes or a row vector broadcast over the rows of a matrix. Per-row scaling
and row tiling/repetition are explicit named operations instead of a general
broadcast, which keeps silent shape bugs out of downstream model code.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import (
    DimensionError,
    DomainError,
    EmptyReductionError,
    RankError,
    TapeError,
)

Array = np.ndarray


def _as_float_array(values) -> Array:
    return np.asarray(values, dtype=np.float64)


class Tensor:
    """A numpy array plus an optional gradient accumulator and graph node."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, values, requires_grad: bool = False):
        self.data: Array = _as_float_array(values)
        self.requires_grad: bool = bool(requires_grad)
        # Leaves created with requires_grad get an eagerly allocated zero
        # accumulator so "gradient of an unreached leaf" reads as zero.
        self.grad: Array | None = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None
        self._consumed: bool = False

    # -- inspection ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise RankError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- gradient management ------------------------------------------------

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)
        elif self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: Array) -> None:
        if self.grad is None:
            # Copy: g may be a read-only broadcast view or an array shared
            # with a sibling accumulator.
            self.grad = np.array(g)
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        """Constant view of the same values, cut off from the graph."""
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        """Fresh leaf with copied values (and its own grad buffer)."""
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return shift(self, float(other)) if _is_number(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return shift(self, -float(other)) if _is_number(other) else sub(self, other)

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        return scale(self, float(other)) if _is_number(other) else mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other)) if _is_number(other) else div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating))


def constant(values) -> Tensor:
    return Tensor(values)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def _node(out_data: Array, parents: Sequence[Tensor], backward_fn: Callable[[Array], None]) -> Tensor:
    out = Tensor(out_data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# -- binary elementwise ------------------------------------------------------

_SAME, _B_IS_ROW, _A_IS_ROW = 0, 1, 2


def _broadcast_mode(a: Tensor, b: Tensor) -> int:
    if a.shape == b.shape:
        return _SAME
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return _B_IS_ROW
    if b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]:
        return _A_IS_ROW
    raise DimensionError(
        f"shapes {a.shape} and {b.shape} are neither equal nor a row vector over a matrix"
    )


def _reduce_to(g: Array, shape: tuple[int, ...]) -> Array:
    # Collapse the broadcast leading axis back onto a row vector operand.
    return g.sum(axis=0) if g.shape != shape else g


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_mode(a, b)

    def backward_fn(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g, b.shape))

    return _node(a.data + b.data, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_mode(a, b)

    def backward_fn(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(-g, b.shape))

    return _node(a.data - b.data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product (with the restricted row-vector broadcast)."""
    _broadcast_mode(a, b)

    def backward_fn(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), backward_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_mode(a, b)
    if np.any(b.data == 0.0):
        raise DomainError("division by zero")

    def backward_fn(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_reduce_to(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(-g * a.data / (b.data * b.data), b.shape))

    return _node(a.data / b.data, (a, b), backward_fn)


# -- unary elementwise -------------------------------------------------------

def neg(a: Tensor) -> Tensor:
    def backward_fn(g: Array) -> None:
        a._accumulate(-g)

    return _node(-a.data, (a,), backward_fn)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    c = float(c)

    def backward_fn(g: Array) -> None:
        a._accumulate(g * c)

    return _node(a.data * c, (a,), backward_fn)


def shift(a: Tensor, c: float) -> Tensor:
    """Add a python scalar."""

    def backward_fn(g: Array) -> None:
        a._accumulate(g)

    return _node(a.data + float(c), (a,), backward_fn)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward_fn(g: Array) -> None:
        a._accumulate(g * out_data)

    return _node(out_data, (a,), backward_fn)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log of a non-positive value")

    def backward_fn(g: Array) -> None:
        a._accumulate(g / a.data)

    return _node(np.log(a.data), (a,), backward_fn)


def abs_(a: Tensor) -> Tensor:
    """|x| with subgradient 0 at the kink."""

    def backward_fn(g: Array) -> None:
        a._accumulate(g * np.sign(a.data))

    return _node(np.abs(a.data), (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def backward_fn(g: Array) -> None:
        a._accumulate(g * mask)

    return _node(a.data * mask, (a,), backward_fn)


def sigmoid(a: Tensor) -> Tensor:
    # tanh half-angle form: branch-free and saturation-safe for huge |x|.
    out_data = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward_fn(g: Array) -> None:
        a._accumulate(g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), backward_fn)


# -- linear algebra / structure ----------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs two matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")

    def backward_fn(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), backward_fn)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.shape}")

    def backward_fn(g: Array) -> None:
        a._accumulate(g.T)

    return _node(a.data.T.copy(), (a,), backward_fn)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} into {shape}")

    def backward_fn(g: Array) -> None:
        a._accumulate(g.reshape(a.shape))

    return _node(a.data.reshape(shape).copy(), (a,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    ndim = tensors[0].ndim
    if axis >= ndim:
        raise DimensionError(f"concat axis {axis} out of range for rank {ndim}")
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        if t.ndim != ndim:
            raise DimensionError(f"concat rank mismatch: {tensors[0].shape} vs {t.shape}")
        other = list(t.shape)
        if ref[:axis] + ref[axis + 1:] != other[:axis] + other[axis + 1:]:
            raise DimensionError(f"concat shapes differ off-axis: {tensors[0].shape} vs {t.shape}")
    extents = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + extents)

    def backward_fn(g: Array) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad and hi > lo:
                index = [slice(None)] * ndim
                index[axis] = slice(lo, hi)
                t._accumulate(g[tuple(index)])

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward_fn)


def scale_rows(a: Tensor, w: Tensor) -> Tensor:
    """Scale row i of a matrix by w[i]; w may itself be differentiable."""
    if a.ndim != 2 or w.ndim != 1 or a.shape[0] != w.shape[0]:
        raise DimensionError(f"scale_rows needs (n, d) and (n,), got {a.shape} and {w.shape}")

    def backward_fn(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * w.data[:, None])
        if w.requires_grad:
            w._accumulate((g * a.data).sum(axis=1))

    return _node(a.data * w.data[:, None], (a, w), backward_fn)


def tile_rows(a: Tensor, times: int) -> Tensor:
    """Stack `times` copies of a matrix: rows [a; a; ...]."""
    if a.ndim != 2:
        raise DimensionError(f"tile_rows needs a matrix, got shape {a.shape}")
    k = a.shape[0]

    def backward_fn(g: Array) -> None:
        a._accumulate(g.reshape(times, k, -1).sum(axis=0))

    return _node(np.tile(a.data, (times, 1)), (a,), backward_fn)


def repeat_rows(a: Tensor, times: int) -> Tensor:
    """Repeat each row `times` times in place: [r0, r0, ..., r1, r1, ...]."""
    if a.ndim != 2:
        raise DimensionError(f"repeat_rows needs a matrix, got shape {a.shape}")
    k = a.shape[0]

    def backward_fn(g: Array) -> None:
        a._accumulate(g.reshape(k, times, -1).sum(axis=1))

    return _node(np.repeat(a.data, times, axis=0), (a,), backward_fn)


def stack_rows(vectors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a matrix (one per row)."""
    return concat([reshape(v, (1, v.shape[0])) for v in vectors], axis=0)


# -- reductions ---------------------------------------------------------------

def _check_reduction(a: Tensor, axis: int | None) -> None:
    if axis is None:
        if a.size == 0:
            raise EmptyReductionError("reduction over an empty tensor")
        return
    if axis >= a.ndim:
        raise DimensionError(f"reduction axis {axis} out of range for rank {a.ndim}")
    if a.shape[axis] == 0:
        raise EmptyReductionError(f"reduction over empty axis {axis} of shape {a.shape}")


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    _check_reduction(a, axis)

    def backward_fn(g: Array) -> None:
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _node(a.data.sum(axis=axis), (a,), backward_fn)


def mean_(a: Tensor, axis: int | None = None) -> Tensor:
    _check_reduction(a, axis)
    count = a.size if axis is None else a.shape[axis]

    def backward_fn(g: Array) -> None:
        if axis is None:
            a._accumulate(np.broadcast_to(g / count, a.shape))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g / count, axis), a.shape))

    return _node(a.data.mean(axis=axis), (a,), backward_fn)


# -- backward pass -------------------------------------------------------------

def trace(root: Tensor) -> list[Tensor]:
    """The recorded operations reachable from `root`, in topological order.

    Raises TapeError if any node was already consumed by a previous backward.
    """
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
        if node._consumed:
            raise TapeError("backward through an already-consumed computation graph")
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable differentiable tensor.

    The loss must be a single element. Gradients add onto whatever is already
    in `.grad`; call `zero_grad` between independent passes. The traversed
    graph is consumed afterwards.
    """
    if loss.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = trace(loss)
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
    for node in order:
        if node._backward is not None:
            node._consumed = True
            node._parents = ()
            node._backward = None
