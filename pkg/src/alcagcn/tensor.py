"""Minimal dense-tensor engine with tape-based reverse-mode differentiation.

Every differentiable primitive computes its forward value with numpy and, when
a :class:`Tape` is active and at least one input requires a gradient, appends a
node holding the backward rule. :func:`backward` walks the tape in reverse and
accumulates gradients into leaf tensors.

Tape policy: a tape records one forward pass; :func:`backward` consumes it and
clears it. Higher-order gradients are not supported.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "ContractError",
    "NonFiniteError",
    "backward",
    "default_dtype",
    "set_default_dtype",
    "precision",
    "as_tensor",
]


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_DEFAULT_DTYPE = np.float32
CHECK_FINITE = True


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype (e.g. to float64 for gradient checks)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name

    # -- basic accessors -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

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
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward = backward_fn


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of the primitive ops executed while the tape is active.

    Use as a context manager::

        with Tape() as tape:
            loss = model(x)
        backward(loss, tape)
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs, output, backward_fn) -> None:
        self.nodes.append(_Node(inputs, output, backward_fn))
        self._produced.add(id(output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def clear(self) -> None:
        self.nodes.clear()
        self._produced.clear()


@contextlib.contextmanager
def no_grad():
    """Suspend recording on every active tape."""
    saved = list(_ACTIVE)
    _ACTIVE.clear()
    try:
        yield
    finally:
        _ACTIVE.extend(saved)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap a forward result and register its backward rule on the active tape."""
    data = np.asarray(data)
    if data.dtype != _DEFAULT_DTYPE and data.dtype.kind == "f":
        data = data.astype(_DEFAULT_DTYPE, copy=False)
    if CHECK_FINITE and not np.isfinite(data).all():
        if all(np.isfinite(t.data).all() for t in inputs):
            raise NonFiniteError("non-finite value produced from finite inputs")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    needs = any(t.requires_grad for t in inputs)
    out.requires_grad = False
    if needs and _ACTIVE:
        out.requires_grad = True
        _ACTIVE[-1].record(tuple(inputs), out, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape, retain: bool = False) -> None:
    """Reverse-mode sweep from a scalar ``loss`` over ``tape``.

    Gradients are accumulated (summed) into ``.grad`` of every leaf tensor
    with ``requires_grad``. The tape is cleared afterwards unless ``retain``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ContractError("loss is detached: it was not produced on this tape, no gradient path")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if tape.produced(t):
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
            else:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += gi.astype(t.data.dtype, copy=False)
    if not retain:
        tape.clear()


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary_inputs(a, b) -> tuple[Tensor, Tensor]:
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


_KINK_OBSERVERS: list[Callable[[np.ndarray], None]] = []


@contextlib.contextmanager
def observe_kinks(callback: Callable[[np.ndarray], None]):
    """Report the on/off pattern of every relu evaluated inside the block to ``callback``.

    Finite-difference checks use it to notice steps that straddle a kink.
    """
    _KINK_OBSERVERS.append(callback)
    try:
        yield
    finally:
        _KINK_OBSERVERS.remove(callback)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    for obs in _KINK_OBSERVERS:
        obs(mask)
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes)
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(out, (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    items = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), bw)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts))
        )

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(np.stack([t.data for t in ts], axis=axis), ts, bw)


def scatter_rows(a, rows: np.ndarray, n_rows: int) -> Tensor:
    """Place the rows of ``a`` at positions ``rows`` of a zero tensor with ``n_rows`` rows."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    if len(rows) != a.shape[0]:
        raise ShapeError("row index count must match leading extent")
    out = np.zeros((n_rows,) + a.shape[1:], dtype=a.data.dtype)
    out[rows] = a.data
    return _make(out, (a,), lambda g: (g[rows],))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw)


_PATH_CACHE: dict = {}


def _einsum(subscripts: str, *arrays):
    key = (subscripts,) + tuple(x.shape for x in arrays)
    path = _PATH_CACHE.get(key)
    if path is None:
        path = np.einsum_path(subscripts, *arrays, optimize=("optimal", 1e12))[0]
        _PATH_CACHE[key] = path
    return np.einsum(subscripts, *arrays, optimize=path)


def einsum(subscripts: str, *operands) -> Tensor:
    """Explicit-output einsum (``'ij,jk->ik'``) without repeated indices in one operand."""
    ts = [as_tensor(t) for t in operands]
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ts):
        raise ShapeError("einsum operand count mismatch")
    sizes: dict[str, int] = {}
    for sub_, t in zip(in_subs, ts):
        if len(sub_) != t.ndim or len(set(sub_)) != len(sub_):
            raise ShapeError(f"einsum subscript {sub_!r} does not fit shape {t.shape}")
        for ch, n in zip(sub_, t.shape):
            if sizes.setdefault(ch, n) != n:
                raise ShapeError(f"einsum extent mismatch on index {ch!r}")
    out = _einsum(subscripts, *(t.data for t in ts))

    def bw(g):
        grads = []
        for i, (sub_, t) in enumerate(zip(in_subs, ts)):
            if not t.requires_grad:
                grads.append(None)
                continue
            others = [(s, x.data) for j, (s, x) in enumerate(zip(in_subs, ts)) if j != i]
            avail = set(out_sub).union(*[set(s) for s, _ in others])
            kept = "".join(ch for ch in sub_ if ch in avail)
            spec = ",".join([out_sub] + [s for s, _ in others]) + "->" + kept
            gi = _einsum(spec, g, *[x for _, x in others])
            if kept != sub_:
                # indices present only in this operand: broadcast the gradient back
                expand = tuple(k for k, ch in enumerate(sub_) if ch not in avail)
                gi = np.broadcast_to(np.expand_dims(gi, expand), t.shape).copy()
            grads.append(gi)
        return tuple(grads)

    return _make(out, ts, bw)


# ---------------------------------------------------------------------------
# normalisation / probability
# ---------------------------------------------------------------------------

def softmax_lastdim(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last dimension")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw)


def log_softmax_lastdim(x) -> Tensor:
    """Log-probabilities via log-sum-exp; never evaluates log(0)."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("log_softmax needs a non-empty last dimension")
    m = x.data.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=-1, keepdims=True))
    out = x.data - lse
    y = np.exp(out)

    def bw(g):
        return (g - y * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), bw)


def norm_lastdim(x) -> Tensor:
    """Euclidean norm over the last axis; the subgradient at the origin is taken as zero."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=-1))

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        return (x.data * scale[..., None],)

    return _make(n, (x,), bw)


def graph_conv(x, adjacency, weight) -> Tensor:
    """Multi-relation graph convolution ``sum_k W_k (x x A_k^T)`` over the joint axis.

    ``x`` is (N, C, T, U), ``adjacency`` (K, U, U) with row = receiving joint,
    ``weight`` (K, O, C). Output is (N, O, T, U):
    ``out[n, o, t, i] = sum_k sum_c sum_j W[k, o, c] x[n, c, t, j] A[k, i, j]``.
    """
    x, adjacency, weight = as_tensor(x), as_tensor(adjacency), as_tensor(weight)
    if x.ndim != 4 or adjacency.ndim != 3 or weight.ndim != 3:
        raise ShapeError("graph_conv expects x (N,C,T,U), adjacency (K,U,U), weight (K,O,C)")
    n, c, t, u = x.shape
    k, o, c2 = weight.shape
    if c2 != c or adjacency.shape != (k, u, u):
        raise ShapeError(f"graph_conv shape mismatch: x={x.shape}, A={adjacency.shape}, W={weight.shape}")
    x2 = np.ascontiguousarray(x.data).reshape(-1, u)
    a, w = adjacency.data, weight.data
    mixed = np.empty((k, n, c, t * u), dtype=x2.dtype)
    for kk in range(k):
        mixed[kk] = (x2 @ a[kk].T).reshape(n, c, t * u)
    out = np.matmul(w[0], mixed[0])
    for kk in range(1, k):
        out += np.matmul(w[kk], mixed[kk])

    def bw(g):
        g3 = np.ascontiguousarray(g).reshape(n, o, t * u)
        gx = np.zeros_like(x2) if x.requires_grad else None
        ga = np.zeros_like(a) if adjacency.requires_grad else None
        gw = np.zeros_like(w) if weight.requires_grad else None
        for kk in range(k):
            if gw is not None:
                gw[kk] = np.matmul(g3, mixed[kk].transpose(0, 2, 1)).sum(axis=0)
            if gx is None and ga is None:
                continue
            gm = np.matmul(w[kk].T, g3).reshape(-1, u)
            if ga is not None:
                ga[kk] = gm.T @ x2
            if gx is not None:
                gx += gm @ a[kk]
        return (None if gx is None else gx.reshape(x.shape)), ga, gw

    return _make(out.reshape(n, o, t, u), (x, adjacency, weight), bw)


def conv_time(x, weight, bias=None, stride: int = 1) -> Tensor:
    """Width-3 temporal convolution with zero padding 1.

    ``x`` is (N, C_in, T, U), ``weight`` is (C_out, C_in, 3), ``bias`` is (C_out,).
    Output is (N, C_out, ceil(T / stride), U).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    ts = [x, weight] + ([as_tensor(bias)] if bias is not None else [])
    if x.ndim != 4 or weight.ndim != 3 or weight.shape[2] != 3:
        raise ShapeError(f"conv_time shapes not understood: x={x.shape}, w={weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError("conv_time channel mismatch")
    if stride not in (1, 2):
        raise ContractError("stride must be 1 or 2")
    n, c, t, u = x.shape
    o = weight.shape[0]
    t_out = -(-t // stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (0, 0)))
    span = stride * (t_out - 1) + 1
    # im2col: (N, 3, C, T_out, U) -> (N, 3C, T_out*U)
    col = np.stack([xp[:, :, j:j + span:stride, :] for j in range(3)], axis=1).reshape(n, 3 * c, t_out * u)
    wc = np.ascontiguousarray(weight.data.transpose(0, 2, 1)).reshape(o, 3 * c)
    out = np.matmul(wc, col)
    if bias is not None:
        out += ts[2].data[None, :, None]

    def bw(g):
        g3 = np.ascontiguousarray(g).reshape(n, o, t_out * u)
        gx = gw = gb = None
        if x.requires_grad:
            dcol = np.matmul(wc.T, g3).reshape(n, 3, c, t_out, u)
            gxp = np.zeros_like(xp)
            for j in range(3):
                gxp[:, :, j:j + span:stride, :] += dcol[:, j]
            gx = gxp[:, :, 1:t + 1, :]
        if weight.requires_grad:
            gwc = np.matmul(g3, col.transpose(0, 2, 1)).sum(axis=0)
            gw = gwc.reshape(o, 3, c).transpose(0, 2, 1)
        if bias is not None and ts[2].requires_grad:
            gb = g3.sum(axis=(0, 2))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return _make(out.reshape(n, o, t_out, u), ts, bw)


def conv1x1(x, weight, bias=None) -> Tensor:
    """Per-position channel mixing: ``x`` (N, C, T, U), ``weight`` (O, C) -> (N, O, T, U)."""
    x, weight = as_tensor(x), as_tensor(weight)
    ts = [x, weight] + ([as_tensor(bias)] if bias is not None else [])
    n, c, t, u = x.shape
    o = weight.shape[0]
    if weight.shape != (o, c):
        raise ShapeError("conv1x1 channel mismatch")
    x3 = np.ascontiguousarray(x.data).reshape(n, c, t * u)
    out = np.matmul(weight.data, x3)
    if bias is not None:
        out += ts[2].data[None, :, None]

    def bw(g):
        g3 = np.ascontiguousarray(g).reshape(n, o, t * u)
        gx = np.matmul(weight.data.T, g3).reshape(x.shape) if x.requires_grad else None
        gw = np.matmul(g3, x3.transpose(0, 2, 1)).sum(axis=0) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g3.sum(axis=(0, 2)) if ts[2].requires_grad else None)
        return tuple(grads)

    return _make(out.reshape(n, o, t, u), ts, bw)


def batch_norm(x, gamma, beta, axes, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalisation over ``axes``; the remaining axes index the feature channels.

    In training mode batch statistics are used and the running buffers (numpy
    arrays, shaped like the kept axes) are updated in place.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = _norm_axis(axes, x.ndim)
    kept_shape = tuple(1 if ax in axes else n for ax, n in enumerate(x.shape))
    count = math.prod(x.shape[ax] for ax in axes)
    gam = gamma.data.reshape(kept_shape)
    bet = beta.data.reshape(kept_shape)
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        unbiased = var * (count / max(count - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(running_mean.shape)
        running_var *= 1 - momentum
        running_var += momentum * unbiased.reshape(running_var.shape)
    else:
        mu = running_mean.reshape(kept_shape)
        var = running_var.reshape(kept_shape)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gam * xhat + bet

    def bw(g):
        ggam = (g * xhat).sum(axis=axes).reshape(gamma.shape) if gamma.requires_grad else None
        gbet = g.sum(axis=axes).reshape(beta.shape) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gam
            if training:
                gx = inv / count * (
                    count * gxhat
                    - gxhat.sum(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = gxhat * inv
        return gx, ggam, gbet

    return _make(out, (x, gamma, beta), bw)


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))
