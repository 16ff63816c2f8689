"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable op appends a :class:`Node` to the active :class:`Graph`.
``backward`` walks the tape in reverse recording order, which is a valid
reverse topological order because a node can only consume tensors recorded
before it.

Broadcasting is deliberately narrow: the two operands of a binary op must have
equal shapes, or one of them must broadcast into the other's shape without
the result growing beyond it.
"""

from __future__ import annotations

import hashlib
import json as _json
import struct as _struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives operands with incompatible shapes."""

    def __init__(self, op: str, shapes: Sequence[tuple]):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_node", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
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


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Graph:
    """Recorded operations in execution order."""

    nodes: list = field(default_factory=list)

    def append(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        # parameters are leaves; only the links from outputs back to nodes are dropped
        for node in self.nodes:
            node.output._node = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Graph":
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()


class _LocalState(threading.local):
    def __init__(self):
        self.stack: list[Graph] = []
        self.default = Graph()
        self.enabled = True


_local = _LocalState()


def current_graph() -> Graph:
    return _local.stack[-1] if _local.stack else _local.default


@contextmanager
def no_grad():
    """Evaluate ops without recording anything on the tape."""
    prev = _local.enabled
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


def grad_enabled() -> bool:
    return _local.enabled


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def record(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn) -> Tensor:
    """Wrap ``out`` as the result of ``op`` and put it on the tape if needed.

    ``backward_fn`` maps the output gradient to one gradient (or ``None``) per
    input, each with the same shape as that input.
    """
    needs = _local.enabled and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        node = Node(op, tuple(inputs), result, backward_fn)
        result._node = node
        current_graph().append(node)
    return result


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = graph if graph is not None else current_graph()
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss._node is None:
        _accumulate_leaf(loss, grads.pop(id(loss)))
        return
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise ShapeError(f"{node.op} (backward)", [gi.shape, t.shape])
            if t._node is None:
                _accumulate_leaf(t, gi)
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


# ---------------------------------------------------------------- helpers


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, [a.shape, b.shape]) from None
    if shape != a.shape and shape != b.shape:
        raise ShapeError(op, [a.shape, b.shape])
    return shape


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(op: str, a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = as_tensor(b, like=a)
    else:
        a = as_tensor(a, like=b)
    _broadcast_shape(op, a, b)
    return a, b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair("add", a, b)
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair("sub", a, b)
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair("mul", a, b)
    return record("mul", (a, b), a.data * b.data,
                  lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                             _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = _pair("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record("div", (a, b), out, bw)


def neg(a: Tensor) -> Tensor:
    return record("neg", (a,), -a.data, lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return record("square", (a,), a.data * a.data, lambda g: (2.0 * g * a.data,))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return record("abs", (a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return record("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return record("sqrt", (a,), out, lambda g: (0.5 * g / out,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so no overflow warnings
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def softplus(a: Tensor, beta: float = 1.0) -> Tensor:
    """``log(1 + exp(beta * x)) / beta``, evaluated without overflow.

    The exponent is clamped at -60 so no subnormal floats are produced; the
    resulting error is below exp(-60) / beta.  The slope is the logistic
    function written through tanh, which saturates to exact 0 and 1 instead of
    producing subnormals.
    """
    x = a.data
    dt = x.dtype.type
    out = np.abs(x)
    out *= dt(beta)
    np.minimum(out, dt(60.0), out=out)
    np.negative(out, out=out)
    np.exp(out, out=out)
    np.log1p(out, out=out)
    out *= dt(1.0 / beta)
    out += np.maximum(x, dt(0.0))

    def bw(g):
        slope = x * dt(0.5 * beta)
        np.tanh(slope, out=slope)
        slope *= dt(0.5)
        slope += dt(0.5)
        slope *= g
        return (slope,)

    return record("softplus", (a,), out, bw)


def relu(a: Tensor) -> Tensor:
    return record("relu", (a,), np.maximum(a.data, 0), lambda g: (g * (a.data > 0),))


def maximum0(a: Tensor) -> Tensor:
    """max(x, 0); alias kept for readability at call sites."""
    return relu(a)


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = np.clip(a.data, lo, hi)

    def bw(g):
        keep = np.ones(a.shape, dtype=bool)
        if lo is not None:
            keep &= a.data >= lo
        if hi is not None:
            keep &= a.data <= hi
        return (g * keep,)

    return record("clamp", (a,), out, bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", [a.shape, b.shape])
    return record("matmul", (a, b), a.data @ b.data,
                  lambda g: (g @ b.data.T if a.requires_grad else None,
                             a.data.T @ g if b.requires_grad else None))


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Batched ``x @ w + b`` for x of shape (N, in), w (in, out), b (out,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or (
            b is not None and b.shape != (w.shape[1],)):
        raise ShapeError("affine", [x.shape, w.shape] + ([b.shape] if b is not None else []))
    out = x.data @ w.data
    if b is not None:
        out += b.data
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0) if b.requires_grad else None

    return record("affine", inputs, out, bw)


def matvec(m: Tensor, v: Tensor, transpose: bool = False) -> Tensor:
    """Batched 3x3 (or k x k) matrix-vector product, (N,k,k) x (N,k) -> (N,k)."""
    if m.ndim != 3 or v.ndim != 2 or m.shape[0] != v.shape[0] or m.shape[2] != v.shape[1]:
        raise ShapeError("matvec", [m.shape, v.shape])
    if transpose:
        out = np.einsum("nji,nj->ni", m.data, v.data)
    else:
        out = np.einsum("nij,nj->ni", m.data, v.data)

    def bw(g):
        gm = gv = None
        if m.requires_grad:
            gm = g[:, :, None] * v.data[:, None, :]
            if transpose:
                gm = np.swapaxes(gm, 1, 2)
        if v.requires_grad:
            gv = (np.einsum("nij,ni->nj", m.data, g) if not transpose
                  else np.einsum("nji,ni->nj", m.data, g))
        return gm, gv

    return record("matvec", (m, v), out, bw)


def norm(a: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis`` (the axis is removed)."""
    out = np.sqrt(np.sum(a.data * a.data, axis=axis))

    def bw(g):
        denom = np.expand_dims(out, axis)
        safe = np.where(denom > 0, denom, 1.0)
        return (np.expand_dims(g, axis) * np.where(denom > 0, a.data / safe, 0.0),)

    return record("norm", (a,), out, bw)


# ---------------------------------------------------------------- reductions / structure


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record("sum", (a,), np.asarray(out), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if a.size == 0:
        raise ShapeError("mean", [a.shape])
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a: Tensor, shape) -> Tensor:
    return record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", [t.shape for t in tensors]) from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concat", tensors, out, bw)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        if _is_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return record("getitem", (a,), np.array(out, copy=True), bw)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def gather(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup ``table[idx]``; the gradient scatters back into those rows only."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("gather", [table.shape, idx.shape])
    out = table.data[idx]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return record("gather", (table,), out, bw)


def scatter_rows(a: Tensor, rows: np.ndarray, n_rows: int) -> Tensor:
    """Place the rows of ``a`` at ``rows`` of a zero tensor with ``n_rows`` rows."""
    rows = np.asarray(rows)
    if len(rows) != a.shape[0]:
        raise ShapeError("scatter_rows", [a.shape, rows.shape])
    out = np.zeros((n_rows,) + a.shape[1:], dtype=a.dtype)
    out[rows] = a.data
    return record("scatter_rows", (a,), out, lambda g: (g[rows],))


def where(mask: np.ndarray, a: Tensor, b) -> Tensor:
    """Select ``a`` where ``mask`` else ``b``; mask is a constant boolean array."""
    a, b = _pair("where", a, b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    return record("where", (a, b), out,
                  lambda g: (_unbroadcast(np.where(mask, g, 0), a.shape),
                             _unbroadcast(np.where(mask, 0, g), b.shape)))


def cumprod_exclusive(a: Tensor) -> Tensor:
    """T[..., i] = prod_{j<i} a[..., j] along the last axis, T[..., 0] = 1."""
    x = a.data
    out = np.ones_like(x)
    if x.shape[-1] > 1:
        out[..., 1:] = np.cumprod(x[..., :-1], axis=-1)

    def bw(g):
        # suffix recursion avoids dividing by factors that may be exactly zero
        n = x.shape[-1]
        gx = np.zeros_like(x)
        acc = np.zeros(x.shape[:-1], dtype=x.dtype)
        for j in range(n - 2, -1, -1):
            acc = g[..., j + 1] + x[..., j + 1] * acc
            gx[..., j] = out[..., j] * acc
        return (gx,)

    return record("cumprod_exclusive", (a,), out, bw)


# ---------------------------------------------------------------- parameters


@dataclass
class ParamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class ParameterSet:
    """Named trainable tensors plus their optimizer moments."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._decay: dict[str, bool] = {}
        self.state: dict[str, ParamState] = {}
        self.skipped_updates = 0

    def register(self, name: str, tensor: Tensor, decay: bool = False) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        if any(t is tensor for t in self._params.values()):
            raise ValueError(f"tensor already registered under another name (new name {name!r})")
        tensor.requires_grad = True
        tensor.name = name
        self._params[name] = tensor
        self._decay[name] = decay
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def decays(self, name: str) -> bool:
        return self._decay[name]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_values(self) -> int:
        return int(np.sum([t.size for t in self._params.values()]))

    def fingerprint(self) -> str:
        """SHA-256 over names and raw parameter bytes."""
        h = hashlib.sha256()
        for name, t in self._params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def copy_values_from(self, other: "ParameterSet") -> None:
        for name, t in self._params.items():
            src = other[name].data
            if src.shape != t.shape:
                raise ShapeError(f"copy {name}", [src.shape, t.shape])
            t.data[...] = src

    def merged(self, *others: "ParameterSet") -> "ParameterSet":
        out = ParameterSet()
        for ps in (self,) + others:
            for name, t in ps:
                out._params[name] = t
                out._decay[name] = ps._decay[name]
        return out


# ---------------------------------------------------------------- gradient oracle


def finite_diff_check(fn: Callable[[ParameterSet], Tensor], params: ParameterSet, h: float = 1e-5,
                      max_entries: int | None = None, rng: np.random.Generator | None = None,
                      names: Iterable[str] | None = None) -> float:
    """Largest relative disagreement between autodiff and central differences.

    For each parameter tensor the error is ``max|a - fd| / (max|a| + floor)``
    over the checked entries, and the result is the max over tensors.  The
    floor is 1e-12 plus 1e-8 of the largest |a| over all checked tensors, so a
    tensor whose true gradient is identically zero compares rounding noise
    against the overall gradient scale instead of against itself.  With
    ``max_entries`` only that many entries per tensor are probed: the ones
    with the largest autodiff gradient first, then random ones.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    params.zero_grad()
    with Graph() as g:
        loss = fn(params)
        _check_finite(loss)
        backward(loss, g)
        g.clear()
    pairs = []
    for name in (names if names is not None else params.names()):
        t = params[name]
        auto = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        idx = _probe_indices(auto.reshape(-1), max_entries, rng)
        fd = np.empty(len(idx))
        for k, i in enumerate(idx):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = _scalar(fn(params))
                flat[i] = orig - h
                fm = _scalar(fn(params))
            flat[i] = orig
            fd[k] = (fp - fm) / (2.0 * h)
        if len(idx):
            pairs.append((auto.reshape(-1)[idx], fd))
    params.zero_grad()
    scale = max((float(np.max(np.abs(a))) for a, _ in pairs), default=0.0)
    floor = 1e-12 + 1e-8 * scale
    worst = 0.0
    for a, fd in pairs:
        worst = max(worst, float(np.max(np.abs(a - fd)) / (np.max(np.abs(a)) + floor)))
    return worst


def _probe_indices(grad: np.ndarray, max_entries: int | None, rng: np.random.Generator) -> np.ndarray:
    n = grad.size
    if max_entries is None or max_entries >= n:
        return np.arange(n)
    top = np.argsort(-np.abs(grad), kind="stable")[: max_entries // 2]
    rest = np.setdiff1d(np.arange(n), top)
    extra = rng.choice(rest, size=max_entries - len(top), replace=False)
    return np.sort(np.concatenate([top, extra]))


def _scalar(t: Tensor) -> float:
    _check_finite(t)
    return float(np.asarray(t.data, dtype=np.float64).reshape(-1)[0])


def _check_finite(t: Tensor) -> None:
    if t.size != 1:
        raise ValueError(f"expected a scalar function value, got shape {t.shape}")
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"function value is not finite: {t.data}")


# ---------------------------------------------------------------- checkpoints
#
# Layout (all integers little-endian):
#   magic      8 bytes  b"SDFCKPT\0"
#   version    u32      CHECKPOINT_VERSION
#   meta_len   u32      length of the UTF-8 JSON metadata block that follows
#   meta       bytes    JSON object, keys sorted (caller metadata + "skipped_updates")
#   count      u32      number of tensors
#   per tensor:
#     name_len u16, name (UTF-8)
#     dtype    u8       0 = float32, 1 = float64
#     ndim     u8, then ndim x u32 dimensions
#     payload  prod(dims) little-endian floats
#     has_opt  u8       1 if optimizer moments follow
#     [step i64, m payload, v payload]

CHECKPOINT_MAGIC = b"SDFCKPT\0"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ParameterSet, metadata: dict | None = None) -> None:
    meta = dict(metadata or {})
    meta["skipped_updates"] = params.skipped_updates
    blob = _json.dumps(meta, sort_keys=True).encode()
    out = [CHECKPOINT_MAGIC, _struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob,
           _struct.pack("<I", len(params))]
    for name, t in params:
        tag = _DTYPE_TAGS.get(t.data.dtype)
        if tag is None:
            raise CheckpointError(f"unsupported dtype {t.data.dtype} for {name}")
        enc = name.encode()
        out.append(_struct.pack("<H", len(enc)) + enc)
        out.append(_struct.pack("<BB", tag, t.data.ndim) + _struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        le = _TAG_DTYPES[tag]
        out.append(np.ascontiguousarray(t.data, dtype=le).tobytes())
        st = params.state.get(name)
        if st is None:
            out.append(b"\0")
        else:
            out.append(b"\1" + _struct.pack("<q", st.step))
            out.append(np.ascontiguousarray(st.m, dtype=le).tobytes())
            out.append(np.ascontiguousarray(st.v, dtype=le).tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(out))


def read_checkpoint(path) -> tuple[dict, dict]:
    """-> (metadata, {name: (values, ParamState | None)})."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    version, meta_len = _struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = _json.loads(take(meta_len).decode())
    (count,) = _struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = _struct.unpack("<H", take(2))
        name = take(name_len).decode()
        tag, ndim = _struct.unpack("<BB", take(2))
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} for {name}")
        shape = _struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _TAG_DTYPES[tag]
        n = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        state = None
        if take(1) == b"\1":
            (step,) = _struct.unpack("<q", take(8))
            m = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape).astype(values.dtype)
            v = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape).astype(values.dtype)
            state = ParamState(m, v, step)
        tensors[name] = (values, state)
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return meta, tensors


def load_checkpoint(path, params: ParameterSet, load_state: bool = True) -> dict:
    """Copy stored values (and optimizer moments) into an already built ParameterSet."""
    meta, tensors = read_checkpoint(path)
    missing = [n for n in params.names() if n not in tensors]
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing}")
    for name, t in params:
        values, state = tensors[name]
        if values.shape != t.shape:
            raise ShapeError(f"load {name}", [values.shape, t.shape])
        t.data[...] = values
        if load_state and state is not None:
            params.state[name] = ParamState(state.m.astype(t.data.dtype), state.v.astype(t.data.dtype),
                                            state.step)
        elif load_state:
            params.state.pop(name, None)
    params.skipped_updates = int(meta.get("skipped_updates", 0))
    return meta
