"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation that touches a tensor with ``requires_grad`` records its
inputs and an adjoint rule on the output tensor.  Those records form the
tape; :func:`backward` orders them topologically and replays the adjoint
rules in reverse.  There is no global graph: a tape is reachable only from
the tensors it produced, so independent threads never share state.

Broadcasting is deliberately narrow.  Binary operations need equal shapes,
except that either side may be a Python number or a single-element tensor.
Anything else must go through :meth:`Tensor.expand`.
"""

from __future__ import annotations

import io
import struct
import threading
from contextlib import contextmanager
from typing import BinaryIO, Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import DimensionError, DomainError, NumericError

DTYPE = np.float64

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Run a block without recording adjoints (thread-local)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """An n-dimensional float64 array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) else data
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar -----------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def flatten(self):
        return reshape(self, (self.size,))

    def expand(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return expand(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad, name=name)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=DTYPE))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# -- shape helpers ------------------------------------------------------------


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (only used for scalar broadcasts)."""
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def _binary_operands(a, b, opname: str) -> tuple[Tensor, Tensor]:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} differ (use expand())")
    return a, b


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def back(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def back(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _result(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def back(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    out = a.data / b.data

    def back(g):
        ga = g / b.data
        return _reduce_to(ga, a.shape), _reduce_to(-ga * out, b.shape)

    return _result(out, (a, b), back)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise TypeError("power() takes a numeric exponent")
    p = float(exponent)

    def back(g):
        return (g * p * a.data ** (p - 1.0),)

    return _result(a.data**p, (a,), back)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(~(a.data > 0)):
        raise DomainError("log of a non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clamp(a, low: float | None = None, high: float | None = None) -> Tensor:
    """Clip values; the gradient is zero wherever clipping was active."""
    a = as_tensor(a)
    out = np.clip(a.data, low, high)

    def back(g):
        live = np.ones_like(a.data, dtype=bool)
        if low is not None:
            live &= a.data >= low
        if high is not None:
            live &= a.data <= high
        return (g * live,)

    return _result(out, (a,), back)


_UNARY = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "abs": absolute,
    "neg": neg,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch an elementwise operation by name."""
    if op in _UNARY:
        if len(args) != 1:
            raise TypeError(f"{op} takes one operand")
        return _UNARY[op](args[0])
    if op in _BINARY:
        if len(args) != 2:
            raise TypeError(f"{op} takes two operands")
        return _BINARY[op](*args)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- linear algebra -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product.  1-D operands act as row/column vectors; 3-D operands
    need identical leading (batch) dimensions."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError(f"matmul: scalar operand (shapes {a.shape} and {b.shape})")
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise DimensionError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    if a.ndim > 2 or b.ndim > 2:
        if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
            raise DimensionError(f"matmul: batch dimensions differ for shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        A, B = a.data, b.data
        if A.ndim == 1 and B.ndim == 1:
            return g * B, g * A
        if A.ndim == 1:
            return B @ g, np.outer(A, g)
        if B.ndim == 1:
            return np.outer(g, B), A.T @ g
        return np.matmul(g, np.swapaxes(B, -1, -2)), np.matmul(np.swapaxes(A, -1, -2), g)

    return _result(out, (a, b), back)


def transpose(a, axes=None) -> Tensor:
    """Permute axes; the default swaps the last two (or reverses a 2-D array)."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            return a
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def flatten(a) -> Tensor:
    return reshape(a, (as_tensor(a).size,))


def expand(a, shape) -> Tensor:
    """Explicit numpy-style broadcast of ``a`` to ``shape``."""
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"expand: cannot broadcast {a.shape} to {shape}") from exc
    lead = len(shape) - a.ndim
    summed = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(a.shape) if s == 1 and shape[lead + i] != 1
    )

    def back(g):
        r = g.sum(axis=summed, keepdims=True) if summed else g
        return (r.reshape(a.shape),)

    return _result(out, (a,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat: nothing to concatenate")
    nd = ts[0].ndim
    ax = axis + nd if axis < 0 else axis
    if not 0 <= ax < nd:
        raise DimensionError(f"concat: axis {axis} invalid for rank {nd}")
    for t in ts:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise DimensionError(f"concat: shapes {[x.shape for x in ts]} disagree off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def back(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))

    return _result(np.concatenate([t.data for t in ts], axis=ax), ts, back)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("stack: nothing to stack")
    nd = ts[0].ndim + 1
    ax = axis + nd if axis < 0 else axis
    new_shape = lambda t: t.shape[:ax] + (1,) + t.shape[ax:]  # noqa: E731
    return concat([reshape(t, new_shape(t)) for t in ts], axis=ax)


def take(a, index) -> Tensor:
    """Basic (slice/integer) indexing with a scatter-add adjoint."""
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise DimensionError(f"index {index!r} out of range for shape {a.shape}") from exc
    out = np.array(out, dtype=DTYPE)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(out, (a,), back)


# -- reductions -------------------------------------------------------------------


def _check_axis(a: Tensor, axis):
    if axis is None:
        return None
    ax = int(axis)
    if not -a.ndim <= ax < a.ndim:
        raise DimensionError(f"axis {axis} invalid for shape {a.shape}")
    return ax % a.ndim


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ax = _check_axis(a, axis)
    out = a.data.sum(axis=ax, keepdims=keepdims)

    def back(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out, dtype=DTYPE), (a,), back)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ax = _check_axis(a, axis)
    count = a.size if ax is None else a.shape[ax]
    return reduce_sum(a, ax, keepdims) * (1.0 / count)


def reduce_max(a, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum; the subgradient goes to the first maximal element."""
    a = as_tensor(a)
    ax = _check_axis(a, axis)
    if ax is None:
        flat_idx = int(np.argmax(a.data))
        out = np.asarray(a.data.reshape(-1)[flat_idx])
        if keepdims:
            out = out.reshape((1,) * a.ndim)

        def back(g):
            full = np.zeros(a.size)
            full[flat_idx] = np.asarray(g).reshape(-1)[0]
            return (full.reshape(a.shape),)

        return _result(out, (a,), back)

    idx = np.expand_dims(np.argmax(a.data, axis=ax), ax)
    out = np.take_along_axis(a.data, idx, axis=ax)
    if not keepdims:
        out = np.squeeze(out, axis=ax)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g, axis=ax)
        return (full,)

    return _result(out, (a,), back)


_REDUCERS = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}


def reduce(op: str, t, axis=None, keepdims: bool = False) -> Tensor:
    if op not in _REDUCERS:
        raise ValueError(f"unknown reduction {op!r}")
    return _REDUCERS[op](t, axis, keepdims)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise DimensionError("softmax of an empty tensor")
    if np.isnan(a.data).any():
        raise NumericError("softmax input contains NaN")
    ax = _check_axis(a, axis)
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _result(out, (a,), back)


# -- the tape -------------------------------------------------------------------------


class Tape:
    """Nodes reachable from a root, in topological order (inputs first)."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, seed: np.ndarray) -> None:
        adjoints: dict[int, np.ndarray] = {id(self.root): seed}
        for node in reversed(self.nodes):
            g = adjoints.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + pg
                else:
                    adjoints[key] = np.asarray(pg, dtype=DTYPE)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every reachable tensor."""
    if root.size != 1:
        raise DimensionError(f"backward needs a scalar output, got shape {root.shape}")
    if not root.requires_grad:
        return
    Tape(root).replay(np.ones_like(root.data))


# -- parameter helpers --------------------------------------------------------------


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE, order="C"), requires_grad=True, name=name)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- binary container ------------------------------------------------------------------

MAGIC = b"ARCT"
VERSION = 1


def write_tensor(fh: BinaryIO, value) -> None:
    """Write one array as an ARCT record (magic, version, rank, dims, LE float64)."""
    arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=DTYPE)
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, rank = struct.unpack("<II", fh.read(8))
    if version != VERSION:
        raise ValueError(f"unsupported ARCT version {version}")
    dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    count = int(np.prod(dims)) if rank else 1
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise ValueError("truncated ARCT record")
    return np.frombuffer(raw, dtype="<f8").astype(DTYPE).reshape(dims)


def save_tensor(path, value) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, value)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def dumps(value) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, value)
    return buf.getvalue()


def loads(blob: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(blob))


def save_named(path, arrays: Mapping[str, object]) -> None:
    """Several named ARCT records in one file, each prefixed by a u32-length UTF-8 name."""
    with open(path, "wb") as fh:
        for name in arrays:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            write_tensor(fh, arrays[name])


def load_named(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        while True:
            head = fh.read(4)
            if not head:
                break
            (n,) = struct.unpack("<I", head)
            name = fh.read(n).decode("utf-8")
            out[name] = read_tensor(fh)
    return out
