"""Dense rank-<=3 tensors with reverse-mode gradients, plus finite-difference checks.

Every op takes and returns :class:`Tensor`. Results remember their parents and a
closure that pushes the output gradient back; :func:`backward` walks the graph
once in reverse topological order and then releases it.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

MAX_RANK = 3
DEFAULT_EPS = 1e-5


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds the maximum of {MAX_RANK} (shape {arr.shape})")
        if any(n <= 0 for n in arr.shape):
            raise ShapeError(f"all extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad or any(p.requires_grad for p in _parents))
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64).reshape(self.shape)
        else:
            self.grad = self.grad + g

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: scale(self, -1.0)
    __matmul__ = lambda self, other: matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out._parents = parents if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    out._consumed = False
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, opname: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: a._accumulate(g * c))


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: a._accumulate(2.0 * a.data * g))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: a._accumulate(g * (1.0 - y * y)))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: a._accumulate(g * y))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU; smooth everywhere, which keeps gradient checks clean."""
    x = a.data
    x2 = x * x
    t = x2 * (_GELU_C * 0.044715)
    t += _GELU_C
    t *= x
    np.tanh(t, out=t)
    y = t + 1.0
    y *= x
    y *= 0.5

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    return _result(y, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and shape
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Supported: (m,k)@(k,n), (B,m,k)@(k,n) and (B,m,k)@(B,k,n).
    """
    a, b = as_tensor(a), as_tensor(b)
    ok = (
        a.ndim in (2, 3)
        and b.ndim in (2, 3)
        and not (a.ndim == 2 and b.ndim == 3)
        and a.shape[-1] == b.shape[-2]
        and (a.ndim != 3 or b.ndim != 3 or a.shape[0] == b.shape[0])
    )
    if not ok:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim == 3:
                k = a.shape[-1]
                b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            else:
                b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _result(out, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got shape {a.shape}")
    return _result(np.swapaxes(a.data, -1, -2).copy(), (a,),
                   lambda g: a._accumulate(np.swapaxes(g, -1, -2)))


def embed(table: Tensor, ids) -> Tensor:
    """Gather rows of a (V, D) table at integer ``ids`` of shape (L,) or (B, L)."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embed: table must be rank 2, got {table.shape}")
    if ids.ndim not in (1, 2) or not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embed: ids must be an integer array of rank 1 or 2, got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embed: id out of range for table with {table.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accumulate(full)

    return _result(table.data[ids], (table,), bw)


def pick(a: Tensor, index) -> Tensor:
    """out[..., i] = a[..., i, index[..., i]] — select one entry along the last axis."""
    index = np.asarray(index)
    if index.shape != a.shape[:-1]:
        raise ShapeError(f"pick: index shape {index.shape} does not match leading shape of {a.shape}")
    sel = np.expand_dims(index, -1)
    out = np.take_along_axis(a.data, sel, axis=-1)[..., 0]

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, sel, np.expand_dims(g, -1), axis=-1)
        a._accumulate(full)

    return _result(out, (a,), bw)


def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a rank-0 tensor."""
    return _result(np.array(a.data.sum()), (a,), lambda g: a._accumulate(np.broadcast_to(g, a.shape)))


def weighted_sum(a: Tensor, weights) -> Tensor:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != a.shape:
        raise ShapeError(f"weighted_sum: weights shape {w.shape} differs from {a.shape}")
    return _result(np.array((a.data * w).sum()), (a,), lambda g: a._accumulate(g * w))


# ---------------------------------------------------------------------------
# row-wise (last axis)
# ---------------------------------------------------------------------------


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        a._accumulate(g - p * g.sum(axis=-1, keepdims=True))

    return _result(y, (a,), bw)


def softmax(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        a._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _result(y, (a,), bw)


def rmsnorm(a: Tensor, eps: float = 1e-6) -> Tensor:
    x = a.data
    d = x.shape[-1]
    r = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    y = x * r

    def bw(g):
        a._accumulate(r * (g - x * (r * r / d) * (g * x).sum(axis=-1, keepdims=True)))

    return _result(y, (a,), bw)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


def forward_graph(program: Callable[..., Tensor], *inputs) -> Tensor:
    """Evaluate ``program`` on ``inputs`` and check that it yields a Tensor.

    ``program`` is any composition of the ops in this module; the returned tensor
    carries the state needed for one :func:`backward` call.
    """
    out = program(*(as_tensor(x) for x in inputs))
    if not isinstance(out, Tensor):
        raise TypeError(f"program returned {type(out).__name__}, expected Tensor")
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward call")
    if not loss.requires_grad:
        loss._consumed = True
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    # interior gradients are scratch space; leaves keep accumulating across calls
    interior = [n for n in order if n._backward is not None]
    for n in interior:
        n.grad = None
    loss.grad = np.ones(loss.shape)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for n in interior:
        n.grad = None
        n._backward = None
        n._parents = ()
        n._consumed = True


# ---------------------------------------------------------------------------
# parameter vectors and gradient oracles
# ---------------------------------------------------------------------------


class ParamVector:
    """Ordered named arrays with a flat view.

    The layout (names, shapes, order) is fixed at construction, so two vectors
    built from the same architecture config flatten identically.
    """

    def __init__(self, arrays: "OrderedDict[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]"):
        self.arrays: OrderedDict[str, np.ndarray] = OrderedDict(
            (k, np.array(v, dtype=np.float64)) for k, v in (arrays.items() if hasattr(arrays, "items") else arrays)
        )

    @property
    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, v.shape) for k, v in self.arrays.items()]

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def flatten(self) -> np.ndarray:
        if not self.arrays:
            return np.zeros(0)
        return np.concatenate([v.reshape(-1) for v in self.arrays.values()])

    def unflatten(self, flat: np.ndarray) -> "ParamVector":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ShapeError(f"unflatten: expected {self.size} values, got shape {flat.shape}")
        out, i = OrderedDict(), 0
        for k, v in self.arrays.items():
            out[k] = flat[i:i + v.size].reshape(v.shape).copy()
            i += v.size
        return ParamVector(out)

    def copy(self) -> "ParamVector":
        return ParamVector(OrderedDict((k, v.copy()) for k, v in self.arrays.items()))

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def tensors(self) -> "OrderedDict[str, Tensor]":
        """Fresh leaf tensors (requires_grad) over copies of the arrays."""
        return OrderedDict((k, Tensor(v, requires_grad=True)) for k, v in self.arrays.items())


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _as_flat(params) -> tuple[np.ndarray, Callable[[np.ndarray], object]]:
    if isinstance(params, ParamVector):
        return params.flatten(), params.unflatten
    flat = np.array(params, dtype=np.float64).reshape(-1)
    return flat, lambda v: v


def _checked(f: Callable, x) -> float:
    val = float(f(x))
    if not math.isfinite(val):
        raise NonFiniteError(f"loss evaluated to {val}")
    return val


def finite_diff_grad(loss_fn: Callable, params, epsilon: float = DEFAULT_EPS) -> np.ndarray:
    """Central-difference gradient of a scalar ``loss_fn`` over every coordinate.

    ``params`` is a :class:`ParamVector` (``loss_fn`` receives a ParamVector) or a
    plain array (``loss_fn`` receives an array of the same shape).
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    flat, rebuild = _as_flat(params)
    shape = None if isinstance(params, ParamVector) else np.shape(params)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        x = flat.copy()
        x[i] = flat[i] + epsilon
        fp = _checked(loss_fn, rebuild(x if shape is None else x.reshape(shape)))
        x[i] = flat[i] - epsilon
        fm = _checked(loss_fn, rebuild(x if shape is None else x.reshape(shape)))
        grad[i] = (fp - fm) / (2.0 * epsilon)
    return grad


def directional_derivative(loss_fn: Callable, params, direction, epsilon: float = DEFAULT_EPS):
    """<grad loss, direction> via the symmetric stencil (f(x+e d) - f(x-e d)) / 2e.

    ``loss_fn`` may return a scalar or a vector; vectors give one derivative per
    entry, which is how per-token sketches are taken from a single pair of passes.
    ``direction`` must have unit Euclidean norm.
    """
    d = np.asarray(direction, dtype=np.float64).reshape(-1)
    norm = float(np.linalg.norm(d))
    if norm == 0.0:
        raise ValueError("direction has zero norm")
    if abs(norm - 1.0) > 1e-8:
        raise ValueError(f"direction must be a unit vector, norm is {norm}")
    flat, rebuild = _as_flat(params)
    shape = None if isinstance(params, ParamVector) else np.shape(params)
    if d.size != flat.size:
        raise ShapeError(f"direction has {d.size} entries, params have {flat.size}")

    def ev(x):
        v = np.asarray(loss_fn(rebuild(x if shape is None else x.reshape(shape))), dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise NonFiniteError("loss evaluated to a non-finite value")
        return v

    out = (ev(flat + epsilon * d) - ev(flat - epsilon * d)) / (2.0 * epsilon)
    return float(out) if out.ndim == 0 else out


def random_unit_vectors(k: int, n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((k, n))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def max_relative_error(a: Sequence[float], b: Sequence[float]) -> float:
    e = relative_error(a, b)
    return float(e.max()) if e.size else 0.0
