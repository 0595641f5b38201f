"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Ops on tensors that require gradients
record a closure mapping the output gradient to the input gradients;
:func:`backward` walks the recorded graph in reverse topological order.

Grad mode and the op counter are thread-local, so independent graphs can be
built on separate threads.
"""

from __future__ import annotations

import contextlib
import threading
from collections import Counter
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, DegenerateBatchError, DimensionError, GraphError, NumericError, ParameterError

_state = threading.local()

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def count_ops() -> Iterator[Counter]:
    """Tally arithmetic work per op name while the block runs.

    Elementwise ops add their output size; ``matmul`` and ``conv2d`` add
    multiply-accumulates.
    """
    prev = getattr(_state, "counter", None)
    counter: Counter = Counter()
    _state.counter = counter
    try:
        yield counter
    finally:
        _state.counter = prev


def _count(name: str, n: int) -> None:
    counter = getattr(_state, "counter", None)
    if counter is not None:
        counter[name] += int(n)


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {where}")


class Tensor:
    """N-dimensional float array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.retains_grad = False
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    # -- introspection -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def retain_grad(self) -> "Tensor":
        """Keep ``grad`` on this non-leaf tensor after :func:`backward`."""
        self.retains_grad = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    # -- operators -----------------------------------------------------
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

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    out._op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ----------------------------------------------------------------------
# reverse pass
# ----------------------------------------------------------------------
def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        key = id(node)
        if i == 0:
            mark = state.get(key)
            if mark == 2:
                continue
            if mark == 1:
                raise GraphError("cycle detected in the computation graph")
            state[key] = 1
        if i < len(node._parents):
            stack.append((node, i + 1))
            parent = node._parents[i]
            if parent.requires_grad:
                pmark = state.get(id(parent))
                if pmark == 1:
                    raise GraphError("cycle detected in the computation graph")
                if pmark is None:
                    stack.append((parent, 0))
        else:
            state[key] = 2
            order.append(node)
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``grad`` of every leaf reachable from a scalar ``loss``.

    Gradients add into existing ``grad`` buffers, so a tensor used twice (or
    across two backward calls) receives the sum.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf or node.retains_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            _check_finite(pg, f"backward of {node._op}")
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    if not retain_graph:
        for node in order:
            if not node.is_leaf:
                node._parents = ()
                node._backward = None


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data
    _count("mul", out.size)
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    _count("div", out.size)

    def fn(g):
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(-g * out / b.data, b.shape)
        return _unbroadcast(g / b.data, a.shape), gb

    return _make(out, (a, b), fn, "div")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    _count("pow", out.size)
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    _count("exp", out.size)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    _count("log", out.size)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    _count("sqrt", out.size)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    mask = a.data > lo
    return _make(np.where(mask, a.data, lo).astype(a.dtype), (a,), lambda g: (g * mask,), "clamp_min")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    """Elementwise ``1 / (1 + exp(-x))``."""
    if a.size == 0:
        raise DimensionError("sigmoid of an empty tensor")
    out = expit(a.data)
    _count("sigmoid", out.size)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# ----------------------------------------------------------------------
# reductions and shape ops
# ----------------------------------------------------------------------
def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if n == 0:
        raise DimensionError("mean over an empty axis")
    return tsum(a, axes, keepdims) * (1.0 / n)


def tmax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    axis = axis % a.ndim
    if a.shape[axis] == 0:
        raise DimensionError("max over an empty axis")
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g, axis=axis)
        return (full,)

    return _make(out if keepdims else np.squeeze(out, axis), (a,), fn, "max")


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    def fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index]), (a,), fn, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, fn, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    axis = axis % out.ndim

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, fn, "stack")


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    _count("matmul", out.size * a.shape[-1])

    def fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), fn, "matmul")


# ----------------------------------------------------------------------
# neural-network primitives
# ----------------------------------------------------------------------
def softmax_t(x: Tensor, tau: float = 1.0, axis: int = -1) -> Tensor:
    """Softmax of ``x / tau`` along ``axis``."""
    if not tau > 0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    z = x.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    _count("softmax", y.size)

    def fn(g):
        return ((y * (g - (g * y).sum(axis=axis, keepdims=True))) / tau,)

    return _make(y, (x,), fn, "softmax")


def log_softmax(x: Tensor, tau: float = 1.0, axis: int = -1) -> Tensor:
    if not tau > 0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    z = x.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def fn(g):
        return ((g - soft * g.sum(axis=axis, keepdims=True)) / tau,)

    return _make(out, (x,), fn, "log_softmax")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0, stride: int = 1) -> Tensor:
    """2-D cross-correlation over ``(n, c, h, w)`` or ``(c, h, w)`` input."""
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = xd.shape
    co, ci, k, kw = weight.shape
    if ci != c:
        raise DimensionError(f"kernel expects {ci} input channels, input has {c}")
    if k != kw or k % 2 == 0:
        raise DimensionError(f"kernel must be square with odd size, got {k}x{kw}")
    if bias is not None and bias.shape != (co,):
        raise DimensionError(f"bias shape {bias.shape} does not match {co} output channels")
    span_h, span_w = h + 2 * padding - k, w + 2 * padding - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise DimensionError(f"non-integral conv output for input {h}x{w}, k={k}, p={padding}, s={stride}")
    ho, wo = span_h // stride + 1, span_w // stride + 1
    pointwise = k == 1 and padding == 0 and stride == 1

    if pointwise:
        cols = xd.reshape(n, c, h * w)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        cols = np.empty((n, c, k, k, ho, wo), dtype=xd.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
        cols = cols.reshape(n, c * k * k, ho * wo)
    wmat = weight.data.reshape(co, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, co, ho, wo)
    _count("conv2d", out.size * c * k * k)

    def fn(g):
        g2 = g.reshape(n, co, ho * wo)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2)
            if pointwise:
                gx = gcols.reshape(n, c, h, w)
            else:
                gcols = gcols.reshape(n, c, k, k, ho, wo)
                gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
                gx = gxp[:, :, padding:padding + h, padding:padding + w]
            if single:
                gx = gx[0]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out[0] if single else out, parents, fn, "conv2d")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalization of an ``(n, c, h, w)`` batch.

    In training mode the batch statistics are used and the running buffers are
    updated in place; in eval mode the running buffers are used.
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects (n, c, h, w), got {x.shape}")
    n, c = x.shape[:2]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("gamma/beta must have one entry per channel")
    axes = (0, 2, 3)
    shape = (1, c, 1, 1)
    if training:
        if n < 2:
            raise DegenerateBatchError("batch_norm in training mode needs at least 2 samples")
        m = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.size // c
        running_mean *= 1.0 - momentum
        running_mean += momentum * m
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / max(count - 1, 1)
    else:
        m, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - m.reshape(shape).astype(x.dtype)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
    _count("batch_norm", out.size)

    def fn(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            scale = (gamma.data * inv_std).reshape(shape)
            if training:
                count = x.size // c
                gx = scale / count * (count * g - gbeta.reshape(shape) - xhat * ggamma.reshape(shape))
            else:
                gx = g * scale
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), fn, "batch_norm")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size x size`` max pooling of ``(n, c, h, w)``."""
    n, c, h, w = x.shape
    if h % size or w % size:
        raise DimensionError(f"{h}x{w} is not divisible by pool size {size}")
    ho, wo = h // size, w // size
    win = x.data.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    idx = np.argmax(win, axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def fn(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx, g[..., None], axis=-1)
        gx = gwin.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _make(out, (x,), fn, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: ``(c, h, w) -> (1, c)``, ``(n, c, h, w) -> (n, c)``."""
    if x.ndim not in (3, 4) or x.shape[-1] * x.shape[-2] == 0:
        raise DimensionError(f"global_avg_pool expects non-empty (c, h, w) or (n, c, h, w), got {x.shape}")
    out = mean(x, axis=(-2, -1))
    return reshape(out, (1, x.shape[0])) if x.ndim == 3 else out


def channel_max_pool(x: Tensor, axis: int = -3, keepdims: bool = False) -> Tensor:
    """Max over the channel axis: ``(B, h, w) -> (h, w)``; ties go to the lowest channel."""
    if x.ndim < 3:
        raise DimensionError(f"channel_max_pool expects at least 3 axes, got {x.shape}")
    return tmax(x, axis=axis, keepdims=keepdims)


def parameters_finite(tensors: Sequence[Tensor]) -> bool:
    return all(np.isfinite(t.data).all() for t in tensors)
