"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and, when gradient tracking is on and
any input requires a gradient, records the closure that maps the output
cotangent back onto its parents. :func:`backward` walks the recorded graph
once in reverse topological order.

Every op checks its output for NaN/Inf and raises ``FloatingPointError``
instead of letting non-finite values propagate.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values produced by {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_vjp", "op")
    __array_priority__ = 100.0
    __array_ufunc__ = None  # make ndarray defer to Tensor's reflected operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "leaf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self.op = "leaf"

    # -- construction -----------------------------------------------------
    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], vjp: Callable, op: str) -> "Tensor":
        data = np.asarray(data, dtype=np.float64)
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __len__(self) -> int:
        return len(self.data)

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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

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

    @property
    def T(self):
        return transpose(self, None)

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(value: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str = "custom") -> Tensor:
    """Register an op with a hand-written vector-Jacobian product.

    ``vjp(g)`` must return one cotangent (or ``None``) per parent.
    """
    return Tensor._result(value, [as_tensor(p) for p in parents], vjp, op)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data + b.data, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data - b.data, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b),
                          lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return Tensor._result(out, (a, b), vjp, "div")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._result(ad ** exponent, (a,),
                          lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if (ad <= 0).any():
        raise FloatingPointError("log of non-positive value")
    return Tensor._result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return Tensor._result(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._result(out, (a,), vjp, "gelu")


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor._result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)

    return Tensor._result(np.where(cond, a.data, b.data), (a, b), vjp, "where")


# -- reductions -------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,),
                          lambda g: (_expand_reduced(g, shape, axis, keepdims).copy(),), "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(np.size(out), 1)
    return Tensor._result(out, (a,),
                          lambda g: (_expand_reduced(g, shape, axis, keepdims) / count,), "mean")


def max_with_index(a, axis: int = -1) -> tuple[Tensor, np.ndarray]:
    """Maximum along ``axis`` and the (first) index attaining it."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    vals = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.put_along_axis(out, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (out,)

    return Tensor._result(vals, (a,), vjp, "max"), idx


# -- shape ops --------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return Tensor._result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.swapaxes(a.data, ax1, ax2), (a,),
                          lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return Tensor._result(a.data[index], (a,), vjp, "getitem")


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along one axis; repeated indices accumulate in the backward pass."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    shape = a.shape
    axis = axis % a.ndim

    def vjp(g):
        out = np.zeros(shape)
        g_moved = np.moveaxis(g, axis, 0)
        out_moved = np.moveaxis(out, axis, 0)
        np.add.at(out_moved, indices, g_moved)
        return (out,)

    return Tensor._result(np.take(a.data, indices, axis=axis), (a,), vjp, "take")


def scatter_add(src, index, length: int) -> Tensor:
    """``out[index[i]] += src[i]`` along axis 0 into ``length`` rows of zeros."""
    src = as_tensor(src)
    index = np.asarray(index, dtype=np.intp)
    out = np.zeros((length,) + src.shape[1:])
    np.add.at(out, index, src.data)
    return Tensor._result(out, (src,), lambda g: (g[index],), "scatter_add")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp, "concat")


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._result(np.stack([t.data for t in tensors], axis=axis), tensors, vjp, "stack")


def pad_spatial(a, pad: int = 1) -> Tensor:
    """Zero-pad axes -3 and -2 (the h, w axes of an ``[..., h, w, C]`` map)."""
    a = as_tensor(a)
    widths = [(0, 0)] * a.ndim
    widths[-3] = widths[-2] = (pad, pad)
    return Tensor._result(np.pad(a.data, widths), (a,),
                          lambda g: (g[..., pad:-pad, pad:-pad, :],), "pad")


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._result(ad @ bd, (a, b), vjp, "matmul")


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` (the last one by default)."""
    a = as_tensor(a)
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (a,), vjp, "softmax")


def softmax_rows(x) -> Tensor:
    """Row-wise softmax of a 2-D tensor."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError("softmax_rows expects a matrix")
    return softmax(x, axis=-1)


def layer_norm(x, weight, bias, eps: float = 1e-6) -> Tensor:
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    wd = weight.data
    n = xd.shape[-1]

    def vjp(g):
        gw = (g * xhat).reshape(-1, n).sum(axis=0)
        gb = g.reshape(-1, n).sum(axis=0)
        gx_hat = g * wd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gw, gb

    return Tensor._result(xhat * wd + bias.data, (x, weight, bias), vjp, "layer_norm")


def depthwise_conv3x3(x, kernel) -> Tensor:
    """Depthwise 3x3 convolution with zero padding 1.

    ``x`` is ``[..., h, w, C]`` and ``kernel`` is ``[3, 3, C]``; output keeps
    the input shape. Implemented as a cross-correlation, as in most DL stacks.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.shape != (3, 3, x.shape[-1]):
        raise ValueError(f"kernel {kernel.shape} does not match channels {x.shape[-1]}")
    h, w = x.shape[-3], x.shape[-2]
    widths = [(0, 0)] * x.ndim
    widths[-3] = widths[-2] = (1, 1)
    xp = np.pad(x.data, widths)
    kd = kernel.data
    out = np.zeros(x.shape)
    for di in range(3):
        for dj in range(3):
            out += xp[..., di:di + h, dj:dj + w, :] * kd[di, dj]

    def vjp(g):
        gxp = np.zeros(xp.shape)
        gk = np.zeros(kd.shape)
        lead = tuple(range(g.ndim - 1))
        for di in range(3):
            for dj in range(3):
                gxp[..., di:di + h, dj:dj + w, :] += g * kd[di, dj]
                gk[di, dj] = (g * xp[..., di:di + h, dj:dj + w, :]).sum(axis=lead)
        return gxp[..., 1:-1, 1:-1, :], gk

    return Tensor._result(out, (x, kernel), vjp, "depthwise_conv3x3")


def attention(q, k, v, scale: float, keep_weights: bool = False):
    """Scaled dot-product attention over the last two axes.

    ``q`` is ``[..., Tq, dh]``, ``k`` and ``v`` are ``[..., Tk, dh]``; all
    leading axes are treated as independent batches and evaluated one at a
    time so the score matrix of only one batch entry is live at once.

    Returns ``(out, weights)``; ``weights`` is the ``[..., Tq, Tk]`` array of
    row-stochastic attention probabilities when ``keep_weights`` is set,
    otherwise ``None``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    lead = q.shape[:-2]
    tq, dh = q.shape[-2:]
    tk = k.shape[-2]
    qd = q.data.reshape(-1, tq, dh)
    kd = k.data.reshape(-1, tk, dh)
    vd = v.data.reshape(-1, tk, v.shape[-1])
    track = grad_enabled() and (q.requires_grad or k.requires_grad or v.requires_grad)
    store = track or keep_weights
    probs = np.empty((qd.shape[0], tq, tk)) if store else None
    out = np.empty((qd.shape[0], tq, vd.shape[-1]))
    for b in range(qd.shape[0]):
        s = (qd[b] @ kd[b].T) * scale
        s -= s.max(axis=-1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=-1, keepdims=True)
        out[b] = s @ vd[b]
        if store:
            probs[b] = s

    def vjp(g):
        g = g.reshape(out.shape)
        gq = np.empty(qd.shape)
        gk = np.empty(kd.shape)
        gv = np.empty(vd.shape)
        for b in range(qd.shape[0]):
            p = probs[b]
            gv[b] = p.T @ g[b]
            gp = g[b] @ vd[b].T
            gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
            gq[b] = gs @ kd[b]
            gk[b] = gs.T @ qd[b]
        return gq.reshape(q.shape), gk.reshape(k.shape), gv.reshape(v.shape)

    result = Tensor._result(out.reshape(lead + (tq, vd.shape[-1])), (q, k, v), vjp, "attention")
    weights = probs.reshape(lead + (tq, tk)) if keep_weights else None
    return result, weights


# -- backward pass ----------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
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
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Back-propagate from a scalar ``loss``.

    Returns a map from every trainable leaf reachable from ``loss`` to its
    gradient. Leaves also get the gradient accumulated into ``.grad``.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaves[node] = g
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            _check_finite(pg, f"backward of {node.op}")
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves


def gradients(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of ``loss`` for each named parameter; unreachable ones get zeros."""
    got = backward(loss)
    return {name: got.get(p, np.zeros(p.shape)) for name, p in params.items()}


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
