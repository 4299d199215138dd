"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value is stored row-major as a ``numpy.float64`` array. Operations on
tensors that require gradients record nodes on an implicit tape (the DAG of
``_parents`` links plus per-node backward closures); ``backward`` on a scalar
walks that tape once in reverse topological order and accumulates gradients
into every ``requires_grad`` leaf. The tape belongs to a single forward pass
and is garbage-collected with its tensors.

Numeric hygiene: an operation either returns an all-finite result or raises
``DomainError``. Overflow and invalid operations are trapped, never allowed
to propagate as silent NaN/Inf.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "exp",
    "log",
    "sqrt",
    "clamp",
    "matmul",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "argmax",
    "reshape",
    "transpose",
    "concat",
    "save_tensor",
    "load_tensor",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class DomainError(ValueError):
    """Numeric domain violation (division by zero, log of non-positive,
    overflow to non-finite, ...)."""


_ERRSTATE = {"over": "raise", "invalid": "raise", "divide": "raise", "under": "ignore"}


def _compute(op: str, fn: Callable[[], np.ndarray]) -> np.ndarray:
    """Run a numpy computation with overflow/invalid trapped as DomainError."""
    try:
        with np.errstate(**_ERRSTATE):
            return fn()
    except FloatingPointError as e:
        raise DomainError(f"{op}: {e}") from None


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise DomainError("tensor data contains non-finite values")
    return arr


class Tensor:
    """A dense float64 array, optionally participating in the gradient tape.

    Tensors are immutable after creation except for gradient accumulation in
    ``grad``. ``_parents`` and ``_backward`` exist only on tensors produced by
    a differentiable op with at least one grad-requiring input.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad)

    @staticmethod
    def ones(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape), requires_grad)

    # -- properties ----------------------------------------------------------

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
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A tape-free copy of this tensor's value."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- autodiff ------------------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        # accumulation always rebinds (never mutates in place), so storing a
        # shared reference on first touch is safe
        self.grad = g if self.grad is None else self.grad + g

    def backward(self) -> None:
        """Reverse-mode sweep from this scalar.

        Populates ``grad`` on every reachable ``requires_grad`` tensor;
        repeated calls without ``zero_grad`` accumulate.
        """
        if self.data.ndim != 0:
            raise ShapeError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        if not self.requires_grad:
            raise ValueError("backward on a tensor detached from the tape")

        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones(())}
        try:
            with np.errstate(**_ERRSTATE):
                for node in order:
                    g = grads.pop(id(node), None)
                    if g is None:
                        continue
                    node._accumulate(g)
                    if node._backward is not None:
                        node._backward_into(g, grads)
        except FloatingPointError as e:
            raise DomainError(f"backward: {e}") from None

    def _backward_into(self, g: np.ndarray, grads: dict[int, np.ndarray]) -> None:
        contributions = self._backward(g)
        for parent, pg in zip(self._parents, contributions):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Optional[Sequence[int]] = None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)

    def __getitem__(self, index) -> "Tensor":
        return _getitem(self, index)


def _toposort(root: Tensor) -> list[Tensor]:
    """Tape order for the backward sweep: every node before its inputs.

    Iterative post-order DFS; each node appears exactly once.
    """
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


# -- node construction ---------------------------------------------------


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    backward: Callable[[np.ndarray], tuple],
) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(data).all():
        raise DomainError(f"{op} produced non-finite values")
    return data


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ops -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = _compute("add", lambda: a.data + b.data)
    return _node(
        data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = _compute("sub", lambda: a.data - b.data)
    return _node(
        data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = _compute("mul", lambda: a.data * b.data)
    return _node(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if np.any(b.data == 0.0):
        raise DomainError("div: divisor contains zero")
    data = _compute("div", lambda: a.data / b.data)
    return _node(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * data / b.data, b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = _wrap(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def scale(a, factor: float) -> Tensor:
    """Multiply by a plain scalar constant."""
    a = _wrap(a)
    factor = float(factor)
    data = _compute("scale", lambda: a.data * factor)
    return _node(data, (a,), lambda g: (g * factor,))


def exp(a) -> Tensor:
    a = _wrap(a)
    data = _compute("exp", lambda: np.exp(a.data))
    return _node(data, (a,), lambda g: (g * data,))


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: input contains non-positive values")
    data = np.log(a.data)
    return _node(data, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt: input contains negative values")
    data = np.sqrt(a.data)

    def backward(g):
        if np.any(data == 0.0):
            raise DomainError("sqrt: gradient at zero is unbounded")
        return (g / (2.0 * data),)

    return _node(data, (a,), backward)


def clamp(a, lo: Optional[float], hi: Optional[float]) -> Tensor:
    """Clip to [lo, hi]; gradient passes through the interior, zero outside."""
    a = _wrap(a)
    lo_v = -np.inf if lo is None else float(lo)
    hi_v = np.inf if hi is None else float(hi)
    if lo_v > hi_v:
        raise ValueError(f"clamp: lo {lo_v} exceeds hi {hi_v}")
    data = np.clip(a.data, lo_v, hi_v)
    mask = (a.data >= lo_v) & (a.data <= hi_v)
    return _node(data, (a,), lambda g: (g * mask,))


# -- matmul ---------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching over leading axes."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul requires rank >= 2 operands, got {a.shape} x {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner extents differ: {a.shape} x {b.shape}"
        )
    data = _check_finite(a.data @ b.data, "matmul")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(data, (a, b), backward)


# -- reductions -------------------------------------------------------------


def _check_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} invalid for rank-{ndim} tensor")
    return axes if not isinstance(axis, int) else axis


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axis = _check_axis(axis, a.ndim)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx, a.shape).copy(),)

    return _node(data, (a,), backward)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axis = _check_axis(axis, a.ndim)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.size // data.size

    def backward(g):
        if axis is None:
            gx = g
        else:
            gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx / count, a.shape).copy(),)

    return _node(data, (a,), backward)


def reduce_max(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the subgradient routes to the first maximal entry."""
    a = _wrap(a)
    axis = _check_axis(axis, a.ndim)
    data = a.data.max(axis=axis, keepdims=keepdims)

    def backward(g):
        expanded = data if (keepdims or axis is None) else np.expand_dims(data, axis)
        hit = a.data == expanded
        first = np.zeros_like(a.data)
        if axis is None:
            idx = np.unravel_index(int(np.argmax(a.data)), a.shape)
            first[idx] = 1.0
        else:
            # lowest-index winner along the reduced axis
            ax = axis if axis >= 0 else axis + a.ndim
            winners = np.argmax(hit, axis=ax)
            np.put_along_axis(first, np.expand_dims(winners, ax), 1.0, axis=ax)
        gx = g if (keepdims or axis is None) else np.expand_dims(g, axis)
        return (first * gx,)

    return _node(data, (a,), backward)


def argmax(a, axis=None) -> np.ndarray:
    """Index of the maximum, ties broken toward the lowest index."""
    a = _wrap(a)
    _check_axis(axis, a.ndim)
    return np.argmax(a.data, axis=axis)


# -- shape ops (all copying; no stride views) --------------------------------


def reshape(a, shape) -> Tensor:
    # returns a view when the layout allows; safe because tensors are
    # immutable after creation
    a = _wrap(a)
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape {a.shape} -> {shape}: {e}") from None
    return _node(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for rank {a.ndim}")
    data = np.ascontiguousarray(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))
    return _node(data, (a,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_wrap(t) for t in tensors]
    if not parts:
        raise ShapeError("concat of an empty sequence")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, range(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return _node(data, tuple(parts), backward)


def _getitem(a: Tensor, index) -> Tensor:
    data = a.data[index]
    if np.isscalar(data) or data.ndim == 0:
        data = np.asarray(data)

    def backward(g):
        gx = np.zeros_like(a.data)
        gx[index] = g
        return (gx,)

    return _node(data, (a,), backward)


# -- serialization ----------------------------------------------------------

_MAGIC = b"LNLT"
_VERSION = 1


def save_tensor(t: Tensor, fh) -> None:
    """Write ``t`` in the little-endian binary tensor format.

    Layout: magic ``LNLT``, version u32, rank u32, extents u64 per axis,
    then the row-major float64 payload.
    """
    close = False
    if isinstance(fh, (str, bytes)):
        fh = open(fh, "wb")
        close = True
    try:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, t.ndim))
        fh.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    finally:
        if close:
            fh.close()


def load_tensor(fh) -> Tensor:
    """Read one tensor written by :func:`save_tensor`."""
    close = False
    if isinstance(fh, (str, bytes)):
        fh = open(fh, "rb")
        close = True
    try:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"bad tensor magic {magic!r}")
        version, rank = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"unsupported tensor format version {version}")
        shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        payload = fh.read(8 * count)
        if len(payload) != 8 * count:
            raise ValueError("truncated tensor payload")
        data = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
        return Tensor(data)
    finally:
        if close:
            fh.close()
