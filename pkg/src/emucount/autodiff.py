"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Every operation records its parents and a closure computing parent
gradients from the output gradient. ``Tensor.backward()`` topologically
sorts the recorded graph and propagates in reverse, accumulating (+=)
into ``.grad`` so shared parameters used by several passes compose.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, NumericError, ShapeError

_FINITE_CHECKS = False


def set_finite_checks(enabled: bool) -> None:
    """Toggle NaN/Inf detection on every op output (slow; a debugging mode)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


class Tensor:
    """Dense float64 array plus the bookkeeping reverse mode needs."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _op="leaf", _parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._op = _op
        self._parents = _parents
        self._backward = None
        if _FINITE_CHECKS and not np.all(np.isfinite(self.data)):
            where = f" in '{name}'" if name else ""
            raise NumericError(f"non-finite values produced by op '{_op}'{where}")

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = self.name or self._op
        return f"Tensor(shape={self.shape}, op={tag!r}, requires_grad={self.requires_grad})"

    # -- graph traversal ---------------------------------------------------

    def backward(self):
        """Populate ``.grad`` of every requires_grad tensor reachable from here.

        The loss must be a single scalar. Gradients accumulate into any
        pre-existing ``.grad`` (call ``zero_grad`` between steps).
        """
        if self.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss is not connected to any requires_grad tensor")
        order = topo_order(self)
        # This call's contributions are staged separately so repeated
        # backward calls accumulate per call, not per traversal step.
        staged = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = staged.pop(id(node))
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                staged[key] = pg if key not in staged else staged[key] + pg

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return hadamard(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ContractError("tensor division only supports scalar divisors")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def flatten(self):
        return reshape(self, (self.size,))

    def transpose(self, axes=None):
        return transpose(self, axes)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, op, backward) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, _op=op,
                 _parents=tuple(parents) if requires else ())
    if requires:
        out._backward = backward
    return out


def topo_order(root: Tensor) -> list[Tensor]:
    """Dependency-first ordering of the requires_grad subgraph below root."""
    seen: set[int] = set()
    order: list[Tensor] = []
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


def find_nonfinite(root: Tensor) -> Tensor | None:
    """First tensor (in forward order) holding a NaN/Inf, else None."""
    for node in topo_order(root):
        if not np.all(np.isfinite(node.data)):
            return node
    return None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if squeeze:
        g = g.sum(axis=squeeze, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), "add", backward)


def hadamard(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"hadamard: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), "hadamard", backward)


def scale(a, s: float) -> Tensor:
    a = _wrap(a)
    s = float(s)

    def backward(g):
        return (g * s,)

    return _make(a.data * s, (a,), "scale", backward)


def relu(a) -> Tensor:
    a = _wrap(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        return (g * (a.data > 0.0),)

    return _make(data, (a,), "relu", backward)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), "sigmoid", backward)


def sqrt(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data < 0):
        raise NumericError("sqrt of negative value")
    data = np.sqrt(a.data)

    def backward(g):
        return (g * (0.5 / data),)

    return _make(data, (a,), "sqrt", backward)


def absolute(a) -> Tensor:
    a = _wrap(a)

    def backward(g):
        return (g * np.sign(a.data),)

    return _make(np.abs(a.data), (a,), "abs", backward)


# -- reductions ------------------------------------------------------------

def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        gk = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gk, a.shape),)

    return _make(data, (a,), "sum", backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- shape manipulation ----------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(data, (a,), "reshape", backward)


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    perm = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(perm))
    data = a.data.transpose(perm)

    def backward(g):
        return (g.transpose(inv),)

    return _make(data, (a,), "transpose", backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of zero tensors")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(data, tensors, "concat", backward)


def take(a, key) -> Tensor:
    """Basic (int/slice/ellipsis) indexing; returns an owned copy."""
    a = _wrap(a)
    _check_basic_key(key)
    data = a.data[key].copy()

    def backward(g):
        ga = np.zeros(a.shape)
        ga[key] = g
        return (ga,)

    return _make(data, (a,), "take", backward)


def _check_basic_key(key):
    parts = key if isinstance(key, tuple) else (key,)
    for p in parts:
        if not isinstance(p, (int, slice, type(Ellipsis))) and p is not None:
            raise ContractError(f"only basic indexing is differentiable, got {type(p).__name__}")


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        return (g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g)

    return _make(data, (a, b), "matmul", backward)


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    a = _wrap(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError(f"softmax_rows needs a non-empty last axis, got {a.shape}")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return ((g - inner) * out,)

    return _make(out, (a,), "softmax_rows", backward)


# -- spatial ops -----------------------------------------------------------

def conv2d(x, kernels, stride=1, padding=0, bias=None) -> Tensor:
    """Cross-correlation of x[C,H,W] with kernels[C2,C,kh,kw].

    Output spatial extent is floor((H + 2*padding - kh)/stride) + 1.
    """
    x, kernels = _wrap(x), _wrap(kernels)
    if x.ndim != 3 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects x[C,H,W], kernels[C2,C,kh,kw]; got {x.shape}, {kernels.shape}")
    c, h, w = x.shape
    c2, ck, kh, kw = kernels.shape
    if ck != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernels {kernels.shape}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if stride < 1:
        raise ContractError(f"conv2d stride must be >= 1, got {stride}")
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (c2,):
            raise ShapeError(f"conv2d bias shape {bias.shape} != ({c2},)")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    h2 = (h + 2 * padding - kh) // stride + 1
    w2 = (w + 2 * padding - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(h2 * w2, c * kh * kw)
    kmat = kernels.data.reshape(c2, c * kh * kw)
    out = (cols @ kmat.T).T.reshape(c2, h2, w2)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def backward(g):
        g2 = g.reshape(c2, h2 * w2)
        gk = (g2 @ cols).reshape(kernels.shape)
        gwin = (g2.T @ kmat).reshape(h2, w2, c, kh, kw).transpose(2, 3, 4, 0, 1)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * h2:stride, j:j + stride * w2:stride] += gwin[:, i, j]
        gx = gxp[:, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _make(out, parents, "conv2d", backward)


def maxpool2d(x, k: int) -> Tensor:
    """Non-overlapping k x k max pooling; extents must divide by k."""
    x = _wrap(x)
    if x.ndim != 3:
        raise ShapeError(f"maxpool2d expects x[C,H,W], got {x.shape}")
    c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"maxpool2d: extents {h}x{w} not divisible by {k}")
    ho, wo = h // k, w // k
    win = x.data.reshape(c, ho, k, wo, k).transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((c, ho, wo, k * k))
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (gw.reshape(c, ho, wo, k, k).transpose(0, 1, 3, 2, 4).reshape(c, h, w),)

    return _make(out, (x,), "maxpool2d", backward)


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    x = _wrap(x)
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def backward(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), "dropout", backward)


def attention_scale(d: int) -> float:
    """1/sqrt(d) scaling shared by every attention path in the package."""
    return 1.0 / math.sqrt(d)
