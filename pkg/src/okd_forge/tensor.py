"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a read-only, C-ordered ``numpy.ndarray``.  Operations
on tensors that require gradients record a node (parents plus a backward
closure) and receive a monotonically increasing creation index; ``backward``
replays the recorded nodes in exact reverse creation order.

Every operation checks its output for NaN/Inf and raises
:class:`~okd_forge.errors.NonFiniteError` instead of propagating it.
"""

from __future__ import annotations

import contextlib
import itertools
import struct
import threading
from typing import BinaryIO, Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NonFiniteError, ParameterError, UsageError

_creation = itertools.count()
_state = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, teacher forward)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def enable_grad():
    """Force graph recording inside the block, even within ``no_grad``."""
    prev = is_grad_enabled()
    _state.enabled = True
    try:
        yield
    finally:
        _state.enabled = prev


def _freeze(arr: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if not arr.flags.c_contiguous:
        arr = arr.copy(order="C")
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} produced non-finite values")
    arr.flags.writeable = False
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_order")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _freeze(np.array(data, dtype=np.float64), "tensor construction")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._order = next(_creation)

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = _freeze(data, op)
        out.grad = None
        out.op = op
        out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        out._order = next(_creation)
        return out

    # -- metadata ---------------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    # -- autograd ---------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every tracked leaf reachable from this scalar.

        Leaf gradients accumulate across calls; clear them with ``zero_grad``.
        """
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("backward() on a tensor that does not require grad")

        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in nodes:
                continue
            nodes[id(t)] = t
            stack.extend(p for p in t._parents if p.requires_grad)
        order = sorted(nodes.values(), key=lambda t: t._order, reverse=True)

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in order:
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t._backward is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar ---------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return Tensor._from_op(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if (x.data <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clamp_min(x, floor: float) -> Tensor:
    """``max(x, floor)``; gradient passes only where ``x > floor``."""
    x = as_tensor(x)
    mask = x.data > floor
    return Tensor._from_op(np.where(mask, x.data, floor), (x,), lambda g: (g * mask,), "clamp_min")


# -- reductions and reshapes ----------------------------------------------
def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return Tensor._from_op(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return Tensor._from_op(out, (x,), backward, "mean")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def global_avg_pool(x) -> Tensor:
    """Mean over every axis after ``(N, C)``."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise DimensionError(f"global_avg_pool needs N×C×spatial input, got {x.shape}")
    return mean(x, axis=tuple(range(2, x.ndim)))


# -- linear algebra -------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data @ b.data, (a, b), backward, "matmul")


def _conv_out(size: int, k: int, stride: int, pad: int, axis: str) -> int:
    if k > size + 2 * pad:
        raise DimensionError(f"kernel {axis}={k} exceeds padded input {size + 2 * pad}")
    return (size + 2 * pad - k) // stride + 1


def _conv_forward(x, w, stride, pad):
    """Cross-correlate N×C×H×W with F×C×kh×kw; returns output and saved columns."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    (sh, sw), (ph, pw) = stride, pad
    ho = _conv_out(h, kh, sh, ph, "height")
    wo = _conv_out(wd, kw, sw, pw, "width")
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    # rows ordered (c, i, j) to match w.reshape(f, -1); columns ordered (n, y, x)
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    out = (w.reshape(f, -1) @ cols).reshape(f, n, ho, wo).transpose(1, 0, 2, 3)
    return out, cols, xp.shape, (ho, wo)


def _conv_backward(g, x_shape, w, cols, xp_shape, out_hw, stride, pad, need_x, need_w):
    n, c, h, wd = x_shape
    f, _, kh, kw = w.shape
    (sh, sw), (ph, pw) = stride, pad
    ho, wo = out_hw
    gm = g.transpose(1, 0, 2, 3).reshape(f, -1)
    gw = (gm @ cols.T).reshape(w.shape) if need_w else None
    gx = None
    if need_x:
        dcols = (w.reshape(f, -1).T @ gm).reshape(c, kh, kw, n, ho, wo)
        gxp = np.zeros((c, n) + tuple(xp_shape[2:]))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += dcols[:, i, j]
        gx = gxp[:, :, ph : ph + h, pw : pw + wd].transpose(1, 0, 2, 3)
    return gx, gw


def _conv_op(x: Tensor, w: Tensor, b: Tensor | None, stride, pad, op, x4, w4, out_shape):
    xd, wd = x4(x.data), w4(w.data)
    out, cols, xp_shape, out_hw = _conv_forward(xd, wd, stride, pad)
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g4 = g.reshape(out.shape)
        gx, gw = _conv_backward(
            g4, xd.shape, wd, cols, xp_shape, out_hw, stride, pad, x.requires_grad, w.requires_grad
        )
        res = [
            None if gx is None else gx.reshape(x.shape),
            None if gw is None else gw.reshape(w.shape),
        ]
        if b is not None:
            res.append(g4.sum(axis=(0, 2, 3)))
        return res

    return Tensor._from_op(out_shape(out), parents, backward, op)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of ``N×C×H×W`` input with ``F×C×kh×kw`` filters."""
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"conv2d: bias shape {b.shape} != ({w.shape[0]},)")
    if stride < 1 or padding < 0:
        raise ParameterError("conv2d: stride must be >= 1 and padding >= 0")
    ident = lambda a: a  # noqa: E731
    return _conv_op(x, w, b, (stride, stride), (padding, padding), "conv2d", ident, ident, ident)


def conv1d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """1D cross-correlation of ``N×C×L`` input with ``F×C×k`` filters."""
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} incompatible with kernel {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"conv1d: bias shape {b.shape} != ({w.shape[0]},)")
    if stride < 1 or padding < 0:
        raise ParameterError("conv1d: stride must be >= 1 and padding >= 0")
    return _conv_op(
        x, w, b, (1, stride), (0, padding), "conv1d",
        lambda a: a[:, :, None, :],
        lambda a: a[:, :, None, :],
        lambda a: a[:, :, 0, :],
    )


def _max_pool(x: Tensor, k: int, spatial: int, op: str) -> Tensor:
    """Non-overlapping max pooling over the trailing ``spatial`` axes.

    Trailing elements that do not fill a window are dropped.  Gradient goes to
    the first maximal element of each window (row-major window order).
    """
    lead = (slice(None), slice(None))
    outs = tuple(n // k for n in x.shape[2:])
    offsets = list(np.ndindex(*(k,) * spatial))

    def window(a, off):
        return a[lead + tuple(slice(o, o + k * m, k) for o, m in zip(off, outs))]

    out = window(x.data, offsets[0])
    idx = np.zeros(out.shape, dtype=np.int8) if x.requires_grad and is_grad_enabled() else None
    for s, off in enumerate(offsets[1:], start=1):
        cand = window(x.data, off)
        if idx is not None:
            idx = np.where(cand > out, np.int8(s), idx)
        out = np.maximum(out, cand)

    def backward(g):
        gx = np.zeros(x.shape)
        for s, off in enumerate(offsets):
            window(gx, off)[...] = g * (idx == s)
        return (gx,)

    return Tensor._from_op(out, (x,), backward, op)


def max_pool2d(x, k: int) -> Tensor:
    """Non-overlapping ``k×k`` max pooling; trailing rows/columns are dropped."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d needs N×C×H×W input, got {x.shape}")
    if k < 1 or k > x.shape[2] or k > x.shape[3]:
        raise DimensionError(f"max_pool2d: window {k} does not fit {x.shape}")
    return _max_pool(x, k, 2, "max_pool2d")


def max_pool1d(x, k: int) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"max_pool1d needs N×C×L input, got {x.shape}")
    if k < 1 or k > x.shape[2]:
        raise DimensionError(f"max_pool1d: window {k} does not fit {x.shape}")
    return _max_pool(x, k, 1, "max_pool1d")


# -- softmax family -------------------------------------------------------
def _check_temperature(pi: float) -> float:
    pi = float(pi)
    if not np.isfinite(pi) or pi <= 0:
        raise ParameterError(f"temperature must be a positive finite number, got {pi}")
    return pi


def softmax_temp(z, pi: float = 1.0) -> Tensor:
    """Row-wise ``exp(z/pi) / sum exp(z/pi)`` over the last axis."""
    z = as_tensor(z)
    pi = _check_temperature(pi)
    s = z.data / pi
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((p * (g - (g * p).sum(axis=-1, keepdims=True))) / pi,)

    return Tensor._from_op(p, (z,), backward, "softmax_temp")


def log_softmax_temp(z, pi: float = 1.0) -> Tensor:
    z = as_tensor(z)
    pi = _check_temperature(pi)
    s = z.data / pi
    shifted = s - s.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(g):
        p = np.exp(out)
        return ((g - p * g.sum(axis=-1, keepdims=True)) / pi,)

    return Tensor._from_op(out, (z,), backward, "log_softmax_temp")


# -- serialization --------------------------------------------------------
MAGIC = b"ODT1"


def write_tensor(fh: BinaryIO, t) -> None:
    """Write ``MAGIC | u32 rank | rank×u64 dims | f64 LE row-major payload``."""
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> Tensor:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    count = int(np.prod(dims)) if rank else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError("truncated tensor payload")
    return Tensor(np.frombuffer(payload, dtype="<f8").reshape(dims))


def save_tensor(path, t) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)
