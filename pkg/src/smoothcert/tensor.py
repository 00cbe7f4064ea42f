"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Only the handful of operations the desk-scale classifiers need are provided.
Every op checks its output for NaN/Inf and raises ``FloatingPointError``
instead of letting non-finite values leak downstream.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_STATE = threading.local()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = grad_enabled()
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


def grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


class Tensor:
    """An n-dimensional float64 array with an optional gradient buffer."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.op = "leaf"
        t._parents = ()
        t._backward = None
        t._consumed = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a finite sum implies finite entries; only an overflowing sum needs the full scan
    if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite output from {op}")


def _make(op: str, out: np.ndarray, parents: Iterable[Tensor], backward_fn) -> Tensor:
    _check_finite(out, op)
    t = Tensor._wrap(out)
    t.op = op
    parents = tuple(parents)
    if grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward_fn
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that take part in differentiation, inputs first."""
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(input) into ``.grad`` of every tracked leaf.

    The graph is released afterwards; calling again on the same loss raises.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("graph already consumed by a previous backward()")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor requiring grad")
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
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
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
    loss._consumed = True


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return _make("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad * bd
    return _make(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise FloatingPointError("log of non-positive value")
    ad = a.data
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


# ---------------------------------------------------------------- shape / reductions


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g.reshape(g.shape if axis is not None else (1,) * len(shape)), shape).copy(),)

    return _make("sum", out.reshape(1) if out.ndim == 0 else out, (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis), 1.0 / float(n))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("stack of empty sequence")
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return _make("stack", out, tensors, bw)


def select(a: Tensor, labels) -> Tensor:
    """Pick a[i, labels[i]] from a 2-D tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    if a.ndim != 2 or labels.shape != (a.shape[0],):
        raise ValueError(f"select needs (N, K) input and N labels, got {a.shape} / {labels.shape}")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        out[rows, labels] = g
        return (out,)

    return _make("select", a.data[rows, labels], (a,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def conv2d(x: Tensor, weight: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation with zero padding; x (N,C,H,W), weight (F,C,k,k)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d shape mismatch {x.shape} * {weight.shape}")
    f, c, k, k2 = weight.shape
    if k != k2:
        raise ValueError("conv2d kernel must be square")
    n, _, hin, win_ = x.shape
    p = int(padding)
    h, w = hin + 2 * p - k + 1, win_ + 2 * p - k + 1
    if h < 1 or w < 1:
        raise ValueError("conv2d kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, :h, :w]  # (N,C,H,W,k,k) view
    wd = weight.data
    out = np.einsum("nchwij,fcij->nfhw", win, wd, optimize=True)

    def bw(g):
        gw = np.einsum("nfhw,nchwij->fcij", g, win, optimize=True) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dxp = np.zeros(xp.shape)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + h, j:j + w] += np.einsum("nfhw,fc->nchw", g, wd[:, :, i, j], optimize=True)
            gx = dxp[:, :, p:p + hin, p:p + win_] if p else dxp
        return gx, gw

    return _make("conv2d", np.ascontiguousarray(out), (x, weight), bw)


def mean_pool2(x: Tensor) -> Tensor:
    """2x2 mean pooling with stride 2 on (N,C,H,W), H and W even."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError("mean_pool2 needs even spatial extents")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _make("mean_pool2", out, (x,), bw)


# ---------------------------------------------------------------- normalisation


def _bn_axes(ndim: int) -> tuple[int, ...]:
    if ndim == 2:
        return (0,)
    if ndim == 4:
        return (0, 2, 3)
    raise ValueError(f"batch_norm supports 2-D or 4-D input, got {ndim}-D")


def _bn_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape(1, -1) if ndim == 2 else v.reshape(1, -1, 1, 1)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mean_=None, var=None, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation followed by the affine map.

    With ``mean_``/``var`` omitted the (biased) statistics of ``x`` itself are
    used and differentiated through; otherwise they are treated as constants.
    """
    axes = _bn_axes(x.ndim)
    nd = x.ndim
    xd = x.data
    batch_stats = mean_ is None
    if batch_stats:
        m = xd.mean(axis=axes)
        v = xd.var(axis=axes)
    else:
        m = np.asarray(mean_, dtype=np.float64)
        v = np.asarray(var, dtype=np.float64)
    inv = 1.0 / np.sqrt(v + eps)
    gd = gamma.data
    count = xd.size // xd.shape[1]
    if batch_stats:
        xhat = (xd - _bn_view(m, nd)) * _bn_view(inv, nd)
        out = xhat * _bn_view(gd, nd) + _bn_view(beta.data, nd)
    else:
        a = gd * inv
        out = xd * _bn_view(a, nd) + _bn_view(beta.data - m * a, nd)

    def bw(g):
        xh = xhat if batch_stats else (xd - _bn_view(m, nd)) * _bn_view(inv, nd)
        ggamma = (g * xh).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * _bn_view(gd, nd)
        if batch_stats:
            gx = _bn_view(inv, nd) / count * (
                count * gxhat
                - _bn_view(gxhat.sum(axis=axes), nd)
                - xh * _bn_view((gxhat * xh).sum(axis=axes), nd)
            )
        else:
            gx = gxhat * _bn_view(inv, nd)
        return gx, ggamma, gbeta

    return _make("batch_norm", out, (x, gamma, beta), bw)


# ---------------------------------------------------------------- probabilities


def _logsumexp(d: np.ndarray, axis: int) -> np.ndarray:
    mx = d.max(axis=axis, keepdims=True)
    return mx + np.log(np.exp(d - mx).sum(axis=axis, keepdims=True))


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    lse = _logsumexp(a.data, axis)
    w = np.exp(a.data - lse)
    return _make("logsumexp", np.squeeze(lse, axis=axis), (a,), lambda g: (np.expand_dims(g, axis) * w,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    s = np.exp(a.data - _logsumexp(a.data, axis))

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make("softmax", s, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = a.data - _logsumexp(a.data, axis)
    s = np.exp(out)
    return _make("log_softmax", out, (a,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of integer ``labels`` under softmax(logits)."""
    nll = neg(select(log_softmax(logits, axis=1), labels))
    if reduction == "sum":
        return sum_(nll)
    if reduction == "mean":
        return mean(nll)
    if reduction == "none":
        return nll
    raise ValueError(f"unknown reduction {reduction!r}")


FORWARD_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "conv2d": conv2d,
    "add": add,
    "mul": mul,
    "relu": relu,
    "reshape": reshape,
    "mean": mean,
    "sum": sum_,
    "softmax": softmax,
    "cross_entropy": cross_entropy,
    "log": log,
    "neg": neg,
    "scale": scale,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a forward op by name."""
    try:
        fn = FORWARD_OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)
