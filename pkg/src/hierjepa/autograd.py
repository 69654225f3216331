"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every operation builds a node holding its inputs and a closure that maps the
output gradient to input gradients. ``Tensor.backward`` walks the graph in
reverse topological order so a node is visited exactly once and shared
subexpressions accumulate the sum of their path gradients.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """Non-finite values reached an operation that forbids them."""


class ConfigError(ValueError):
    """An operation parameter is outside its valid range."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; results are constants."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph ------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators --------------------------------------------------------
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

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


class Parameter(Tensor):
    """A trainable leaf tensor carrying a checkpoint path name."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    keep = a.data > 0
    return _make(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), back)


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip into [lo, hi]; gradient passes only where the input was inside."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _make(out, (a,), lambda g: (g * inside,))


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return _make(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)),
    )


# ---------------------------------------------------------------------------
# reductions and shape plumbing
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def variance(a, axis: int = 0, ddof: int = 1) -> Tensor:
    """Sample variance along ``axis`` (ddof=1 by default)."""
    a = as_tensor(a)
    n = a.shape[axis]
    centered = a - mean(a, axis, keepdims=True)
    return tsum(centered * centered, axis) * (1.0 / (n - ddof))


def covariance(z) -> Tensor:
    """Sample covariance of the columns of a (samples x dim) matrix."""
    z = as_tensor(z)
    n = z.shape[0]
    centered = z - mean(z, 0, keepdims=True)
    return matmul(transpose(centered, (1, 0)), centered) * (1.0 / (n - 1))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def back(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def back(g):
        out = []
        for i in range(len(ts)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return out

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, back)


def gather_rows(a, index: np.ndarray) -> Tensor:
    """Batched row gather: ``a`` is (B, n, ...), ``index`` is (B, L) -> (B, L, ...)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    bidx = np.arange(a.shape[0])[:, None]

    def back(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(full, (bidx, index), g)
        return (full,)

    return _make(a.data[bidx, index], (a,), back)


def scatter_rows(a, index: np.ndarray, n: int, valid: np.ndarray | None = None) -> Tensor:
    """Inverse of :func:`gather_rows` for distinct indices; unfilled rows are zero.

    ``valid`` (B, L) marks which gathered rows are real; padded entries are
    ignored so their (arbitrary) index never overwrites a real row.
    """
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if valid is None:
        valid = np.ones(index.shape, dtype=bool)
    bsel, lsel = np.nonzero(valid)
    tgt = index[bsel, lsel]
    out = np.zeros((a.shape[0], n) + a.shape[2:], dtype=DTYPE)
    out[bsel, tgt] = a.data[bsel, lsel]

    def back(g):
        ga = np.zeros(a.shape, dtype=DTYPE)
        ga[bsel, lsel] = g[bsel, tgt]
        return (ga,)

    return _make(out, (a,), back)


# ---------------------------------------------------------------------------
# linear algebra and nn primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(a.data @ b.data, (a, b), back)


def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-stabilised softmax; ``mask`` (broadcastable, True = keep) zeroes entries.

    Rows whose entries are all masked come out as zeros.
    """
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    s = e.sum(axis=axis, keepdims=True)
    out = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), back)


def softmax_rows(x, mask: np.ndarray | None = None) -> Tensor:
    return softmax(x, axis=-1, mask=mask)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        gxhat = g * gamma.data
        d = x.shape[-1]
        gx = inv / d * (d * gxhat - gxhat.sum(-1, keepdims=True) - xhat * (gxhat * xhat).sum(-1, keepdims=True))
        return (
            gx,
            _unbroadcast(g * xhat, gamma.shape),
            _unbroadcast(g, beta.shape),
        )

    return _make(out, (x, gamma, beta), back)


def smooth_l1(x, y, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style loss: quadratic below ``beta``, linear above."""
    if beta <= 0:
        raise ConfigError(f"smooth_l1 beta must be > 0, got {beta}")
    x, y = as_tensor(x), as_tensor(y)
    d = x.data - y.data
    ad = np.abs(d)
    small = ad < beta
    out = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)

    def back(g):
        gd = g * np.where(small, d / beta, np.sign(d))
        return (_unbroadcast(gd, x.shape), _unbroadcast(-gd, y.shape))

    return _make(out, (x, y), back)


def conv1d(x, weight, bias) -> Tensor:
    """Same-padded stride-1 convolution over the sequence axis.

    ``x`` is (n, c_in) or (B, n, c_in); ``weight`` is (k, c_in, c_out) with odd k.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    k, c_in, c_out = weight.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d kernel size must be odd for same padding, got {k}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.shape[-1] != c_in:
        raise ShapeError(f"conv1d channels: input {x.shape} vs kernel {weight.shape}")
    B, n, _ = xd.shape
    half = k // 2
    xp = np.pad(xd, ((0, 0), (half, half), (0, 0)))
    # windows[b, t, j, c] = xp[b, t + j, c]
    windows = np.stack([xp[:, j : j + n] for j in range(k)], axis=2)
    cols = windows.reshape(B * n, k * c_in)
    wmat = weight.data.reshape(k * c_in, c_out)
    out = (cols @ wmat).reshape(B, n, c_out) + bias.data
    if squeeze:
        out = out[0]

    def back(g):
        g3 = g[None] if squeeze else g
        g2 = g3.reshape(B * n, c_out)
        gw = (cols.T @ g2).reshape(k, c_in, c_out)
        gb = g2.sum(axis=0)
        gcols = (g2 @ wmat.T).reshape(B, n, k, c_in)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, j : j + n] += gcols[:, :, j]
        gx = gxp[:, half : half + n]
        if squeeze:
            gx = gx[0]
        return (gx, gw, gb)

    return _make(out, (x, weight, bias), back)


def maxpool1d(x, mask: np.ndarray | None = None) -> Tensor:
    """Window-2 stride-2 max pooling over the sequence axis with floor length.

    Ties route the gradient to the first element of the window. ``x`` is
    (n, c) or (B, n, c).
    """
    x = as_tensor(x)
    n = x.shape[-2]
    if n < 2:
        raise ShapeError(f"maxpool1d needs length >= 2, got {n}")
    m = n // 2
    a = x.data[..., 0 : 2 * m : 2, :]
    b = x.data[..., 1 : 2 * m : 2, :]
    take_first = a >= b
    out = np.where(take_first, a, b)

    def back(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        gx[..., 0 : 2 * m : 2, :] = np.where(take_first, g, 0.0)
        gx[..., 1 : 2 * m : 2, :] = np.where(take_first, 0.0, g)
        return (gx,)

    return _make(out, (x,), back)


def conv_transpose1d(a, weight, bias) -> Tensor:
    """Upsample square maps 2x along rows then columns (kernel 2, stride 2).

    ``a`` is (..., n, n); ``weight`` has shape (2,) and ``bias`` is a scalar.
    Row pass: ``Y[2i+s, j] = w[s] * A[i, j] + b``; the column pass applies the
    same kernel to ``Y`` along the last axis.
    """
    a, weight, bias = as_tensor(a), as_tensor(weight), as_tensor(bias)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"conv_transpose1d expects square maps, got {a.shape}")
    if weight.shape != (2,):
        raise ShapeError(f"conv_transpose1d weight must have shape (2,), got {weight.shape}")
    w = weight.data
    b = float(bias.data)
    A = a.data
    n = A.shape[-1]
    # rows
    Y = np.empty(A.shape[:-2] + (2 * n, n), dtype=DTYPE)
    Y[..., 0::2, :] = w[0] * A + b
    Y[..., 1::2, :] = w[1] * A + b
    Z = np.empty(A.shape[:-2] + (2 * n, 2 * n), dtype=DTYPE)
    Z[..., :, 0::2] = w[0] * Y + b
    Z[..., :, 1::2] = w[1] * Y + b

    def back(g):
        g0 = g[..., :, 0::2]
        g1 = g[..., :, 1::2]
        gY = w[0] * g0 + w[1] * g1
        gw = np.array([(g0 * Y).sum(), (g1 * Y).sum()])
        gb = g.sum()
        h0 = gY[..., 0::2, :]
        h1 = gY[..., 1::2, :]
        gA = w[0] * h0 + w[1] * h1
        gw = gw + np.array([(h0 * A).sum(), (h1 * A).sum()])
        gb = gb + gY.sum()
        return (gA, gw, np.asarray(gb).reshape(bias.shape))

    return _make(Z, (a, weight, bias), back)


# ---------------------------------------------------------------------------
# numerical gradient checking
# ---------------------------------------------------------------------------

def numerical_grad(fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-6,
                   indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``param.data``.

    When ``indices`` is given only those entries are probed (others stay 0).
    """
    grad = np.zeros(param.shape, dtype=DTYPE)
    it = indices if indices is not None else list(np.ndindex(*param.shape))
    with no_grad():
        for idx in it:
            orig = param.data[idx]
            param.data[idx] = orig + eps
            fp = float(fn().data)
            param.data[idx] = orig - eps
            fm = float(fn().data)
            param.data[idx] = orig
            grad[idx] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = float(np.linalg.norm(np.ravel(a) - np.ravel(b)))
    den = max(float(np.linalg.norm(np.ravel(a))), float(np.linalg.norm(np.ravel(b))), 1e-12)
    return num / den


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
              seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn(*inputs)`` may return any shape; it is contracted with a fixed random
    weight tensor to a scalar so every output entry is exercised.
    """
    inputs = [t for t in inputs]
    out = fn(*inputs)
    weights = np.random.default_rng(seed).standard_normal(out.shape)

    def scalar():
        return tsum(fn(*inputs) * weights)

    for t in inputs:
        t.grad = None
    loss = scalar()
    loss.backward()
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        numeric = numerical_grad(scalar, t, eps)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
