"""
Minimal reverse-mode differentiation over dense numpy arrays.

Every operation on a :class:`Tensor` that requires a gradient records its
inputs and vector-Jacobian products. :func:`backward` rebuilds the tape from a
scalar root, walks it in reverse topological order and accumulates gradients
into leaves that were created with ``requires_grad=True``.

Graphs are dynamic: nothing is cached between calls, so a tape lives exactly
as long as the tensors that make it up.
"""

import contextlib
import logging
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from lodslab.utils import ShapeError

logger = logging.getLogger(__name__)

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32

Vjp = Callable[[np.ndarray], np.ndarray]


def set_default_dtype(name: str):
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"Unknown precision '{name}', expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the dtype used for newly created tensors."""
    global _default_dtype
    previous = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _default_dtype = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype if dtype is not None else _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._vjps: Tuple[Vjp, ...] = ()

    @classmethod
    def _node(cls, data: np.ndarray, op: str, parents: Sequence["Tensor"], vjps: Sequence[Vjp]):
        out = cls.__new__(cls)
        out.data = np.asarray(data)
        out.grad = None
        out.op = op
        # only parents that require grad now are recorded; later flag changes do not reopen the edge
        live = [(p, v) for p, v in zip(parents, vjps) if p.requires_grad]
        out.requires_grad = bool(live)
        if live:
            out._parents = tuple(p for p, _ in live)
            out._vjps = tuple(v for _, v in live)
        else:
            out._parents = ()
            out._vjps = ()
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
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
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return detach(self)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def square(self):
        return square(self)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _pair(a: TensorLike, b: TensorLike) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---- elementwise binary ----


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    return Tensor._node(
        a.data + b.data,
        "add",
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    return Tensor._node(
        a.data - b.data,
        "sub",
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
    )


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    return Tensor._node(
        a.data * b.data,
        "mul",
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.shape),
            lambda g: _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return Tensor._node(
        out,
        "div",
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.shape),
            lambda g: _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    return Tensor._node(a.data * factor, "scale", (a,), (lambda g: g * factor,))


def neg(a: Tensor) -> Tensor:
    return Tensor._node(-a.data, "neg", (a,), (lambda g: -g,))


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    return Tensor._node(
        a.data @ b.data,
        "matmul",
        (a, b),
        (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
    )


# ---- elementwise unary ----


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._node(out, "exp", (a,), (lambda g: g * out,))


def square(a: Tensor) -> Tensor:
    return Tensor._node(np.square(a.data), "square", (a,), (lambda g: 2 * g * a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._node(out, "tanh", (a,), (lambda g: g * (1 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return Tensor._node(out, "sigmoid", (a,), (lambda g: g * out * (1 - out),))


def silu(a: Tensor) -> Tensor:
    s = expit(a.data)
    return Tensor._node(
        a.data * s, "silu", (a,), (lambda g: g * (s + a.data * s * (1 - s)),)
    )


def cos(a: Tensor) -> Tensor:
    return Tensor._node(np.cos(a.data), "cos", (a,), (lambda g: -g * np.sin(a.data),))


def sin(a: Tensor) -> Tensor:
    return Tensor._node(np.sin(a.data), "sin", (a,), (lambda g: g * np.cos(a.data),))


# ---- shape ----


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {tuple(shape)}") from None
    return Tensor._node(out, "reshape", (a,), (lambda g: g.reshape(a.shape),))


def broadcast_to(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: shapes {a.shape} and {tuple(shape)} do not broadcast") from None
    return Tensor._node(out, "broadcast", (a,), (lambda g: _unbroadcast(g, a.shape),))


def concat(tensors: Sequence[TensorLike], axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        shapes = ", ".join(str(p.shape) for p in parts)
        raise ShapeError(f"concat: shapes {shapes} cannot be joined on axis {axis}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def piece(i):
        return lambda g: np.split(g, bounds, axis=axis)[i]

    return Tensor._node(out, "concat", parts, [piece(i) for i in range(len(parts))])


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def vjp(g):
        full = np.zeros_like(a.data, dtype=g.dtype)
        np.add.at(full, index, g)
        return full

    return Tensor._node(out, "getitem", (a,), (vjp,))


def take_rows(table: Tensor, rows: Union[np.ndarray, Sequence[int]]) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    rows = np.asarray(rows, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"take_rows: table must be 2-D, got shape {table.shape}")

    def vjp(g):
        full = np.zeros_like(table.data, dtype=g.dtype)
        np.add.at(full, rows, g)
        return full

    return Tensor._node(table.data[rows], "take_rows", (table,), (vjp,))


# ---- reductions ----


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape)

    return Tensor._node(out, "sum", (a,), (vjp,))


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def mse(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    return reduce_mean(square(sub(a, b)))


def dot_constant(a: Tensor, weights: np.ndarray) -> Tensor:
    """sum(a * weights) with weights held constant."""
    weights = np.asarray(weights, dtype=a.dtype)
    if weights.shape != a.shape:
        raise ShapeError(f"dot: shapes {a.shape} and {weights.shape} differ")
    return reduce_sum(mul(a, Tensor(weights, dtype=a.dtype)))


def detach(a: Tensor) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = a.data
    out.requires_grad = False
    out.grad = None
    out.op = "detach"
    out._parents = ()
    out._vjps = ()
    return out


# ---- tape ----


class Tape:
    """Ordered record of the nodes reachable from a root, inputs first."""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: List[Tensor] = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.nodes)

    def reverse(self) -> Iterator[Tensor]:
        return reversed(self.nodes)


def backward(root: Tensor) -> Tape:
    """Accumulate d(root)/d(leaf) into every requires_grad leaf."""
    if root.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        logger.debug("backward called on a root with no differentiable inputs")
        return Tape([])
    tape = Tape.from_root(root)
    pending = {id(root): np.ones_like(root.data)}
    for node in tape.reverse():
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            g = np.array(g, dtype=node.dtype).reshape(node.shape)
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, vjp in zip(node._parents, node._vjps):
            if not parent.requires_grad:
                continue
            pg = vjp(g)
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
    return tape


def zero_grad(tensors: Iterable[Tensor]):
    for t in tensors:
        t.grad = None
