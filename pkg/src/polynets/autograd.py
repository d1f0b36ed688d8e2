"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Only the operations the polynomial blocks and their regularizers need are
provided. Every op records its parents and a closure that maps the output
gradient to one gradient per parent; :func:`backward` walks that graph in
reverse topological order and accumulates into the ``grad`` slot of every
leaf that requires a gradient.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf."""


_grad_enabled = True
_faults: set = set()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def inject_fault(name: str = "hadamard_sign"):
    """Corrupt a backward rule on purpose (negative control for gradient checks).

    Supported faults: ``hadamard_sign`` flips the sign of both hadamard
    gradients; ``matmul_sign`` flips the matmul gradients.
    """
    _faults.add(name)
    try:
        yield
    finally:
        _faults.discard(name)


class Tensor:
    """Dense array with an optional gradient slot and a recorded history."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = ""

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op or 'leaf'})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis, keepdims)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A trainable leaf tensor registered under a unique dotted name."""

    def __init__(self, data, name: str = "", init=None):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.init = init

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {op}")
    out = Tensor(data)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting (used for bias terms)."""
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    """Broadcasting elementwise product; scalars allowed on either side."""
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward, "mul")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Strict elementwise product of two equally shaped tensors."""
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: shape mismatch {a.shape} vs {b.shape}")
    out = a.data * b.data

    def backward(g):
        ga, gb = g * b.data, g * a.data
        if "hadamard_sign" in _faults:
            ga, gb = -ga, -gb
        return ga, gb

    return _make(out, (a, b), backward, "hadamard")


def power(a: Tensor, exponent: float) -> Tensor:
    a = _wrap(a)
    out = a.data ** exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(out, (a,), backward, "power")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward, "exp")


def relu(a: Tensor) -> Tensor:
    """Non-polynomial; only for hybrid comparison models."""
    mask = a.data > 0
    out = a.data * mask

    def backward(g):
        return (g * mask,)

    return _make(out, (a,), backward, "relu")


# ---------------------------------------------------------------------------
# shape and reductions
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return _make(out, (a,), backward, "transpose")


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = range(a.ndim) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([a.shape[i] for i in axes]))
    return mul(tensor_sum(a, axis, keepdims), 1.0 / count)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """``a[..., start:stop, ...]`` along one axis."""
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(out.copy(), (a,), backward, "slice")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _make(out, tuple(tensors), backward, "concat")


# ---------------------------------------------------------------------------
# linear maps
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an m x k and a k x n tensor."""
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga, gb = g @ b.data.T, a.data.T @ g
        if "matmul_sign" in _faults:
            ga, gb = -ga, -gb
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding.

    ``x`` is N x C x H x W, ``kernel`` is F x C x kh x kw.
    """
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d: incompatible shapes {x.shape} and {kernel.shape}")
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise DimensionError(
            f"conv2d: non-positive output extent {ho}x{wo} for input {x.shape}, "
            f"kernel {kernel.shape}, stride {stride}, padding {padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    windows = windows[:, :, :ho, :wo]
    # (N, Ho, Wo, F) -> (N, F, Ho, Wo)
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g):
        gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, kernel.data[:, :, i, j], axes=([1], [0]))
                gxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                    j:j + stride * (wo - 1) + 1:stride] += contrib.transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk

    return _make(out, (x, kernel), backward, "conv2d")


def max_pool2d(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    """Windowed maximum; gradient goes to the first maximum in row-major order."""
    stride = k if stride is None else stride
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d: expected N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    if k > h or k > w or ho <= 0 or wo <= 0:
        raise DimensionError(f"max_pool2d: window {k} too large for input {x.shape}")
    windows = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = windows.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        di, dj = np.divmod(arg, k)
        rows = np.arange(ho)[None, None, :, None] * stride + di
        cols = np.arange(wo)[None, None, None, :] * stride + dj
        base = (np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * (h * w)
        flat_index = (base + rows * w + cols).ravel()
        gx = np.bincount(flat_index, weights=g.ravel(), minlength=n * c * h * w)
        return (gx.reshape(x.shape).astype(g.dtype, copy=False),)

    return _make(out, (x,), backward, "max_pool2d")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of ``-sum_k t_k log softmax(logits)_k``.

    ``targets`` must be row-stochastic (one-hot or smoothed labels).
    """
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=logits.dtype)
    if logits.ndim != 2 or t.shape != logits.shape:
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} vs targets {t.shape}")
    if logits.shape[1] < 2:
        raise ValueError("softmax_cross_entropy needs at least 2 classes")
    row_sums = t.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6) or np.any(t < 0):
        bad = int(np.argmax(np.abs(row_sums - 1.0)))
        raise ValueError(f"target row {bad} is not stochastic (sums to {row_sums[bad]!r})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - logsumexp
    n = logits.shape[0]
    loss = -(t * log_probs).sum() / n

    def backward(g):
        return (g * (np.exp(log_probs) - t) / n,)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_cross_entropy")


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise DimensionError(f"mse_loss: prediction {pred.shape} vs target {t.shape}")
    diff = pred.data - t
    loss = np.mean(diff ** 2)

    def backward(g):
        return (g * 2.0 * diff / diff.size,)

    return _make(np.asarray(loss, dtype=pred.dtype), (pred,), backward, "mse_loss")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    The graph is kept, so calling this twice without zeroing doubles the
    gradients.
    """
    if loss.data.size != 1:
        raise RuntimeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
