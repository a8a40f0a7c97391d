"""Dense tensors with reverse-mode gradients.

A ``Tensor`` wraps a numpy array. Every operation on tensors that require
gradients records a node carrying a monotonically increasing sequence number;
``backward`` collects the nodes reachable from the loss, orders them by that
number and runs their local gradient rules in exact reverse execution order.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_sequence = itertools.count()
_grad_enabled = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._seq = next(_sequence)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return swap_last(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def _lift(a, b):
    """Convert a pair of operands to tensors of a common dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _node(data: np.ndarray, parents: Sequence[Tensor], rule) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def rule(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(data, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}") from exc

    def rule(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(data, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def rule(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), rule)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _lift(a, b)
    if a.ndim < 1 or b.ndim < 1:
        raise DimensionError(f"matmul needs at least 1-d operands, got {a.shape} and {b.shape}")
    k_a = a.shape[-1]
    k_b = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if k_a != k_b:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def rule(g):
        ad = a.data if a.ndim >= 2 else a.data[None, :]
        bd = b.data if b.ndim >= 2 else b.data[:, None]
        gg = g
        if a.ndim == 1:
            gg = np.expand_dims(gg, -2)
        if b.ndim == 1:
            gg = np.expand_dims(gg, -1)
        if a.requires_grad:
            ga = np.matmul(gg, np.swapaxes(bd, -1, -2))
            ga = _unbroadcast(ga, ad.shape).reshape(a.shape)
            _accumulate(a, ga)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(ad, -1, -2), gg)
            gb = _unbroadcast(gb, bd.shape).reshape(b.shape)
            _accumulate(b, gb)

    return _node(data, (a, b), rule)


def swap_last(x: Tensor) -> Tensor:
    """Transpose the last two axes."""
    if x.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 axes, got shape {x.shape}")
    data = np.swapaxes(x.data, -1, -2)

    def rule(g):
        _accumulate(x, np.swapaxes(g, -1, -2))

    return _node(data, (x,), rule)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    data = np.sum(x.data, axis=axes)

    def rule(g):
        if axes is not None:
            g = np.expand_dims(g, axes)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _node(np.asarray(data), (x,), rule)


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = x.data.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis), 1.0 / count)


def relu(x: Tensor) -> Tensor:
    """Element-wise max(0, x); the subgradient at 0 is 0."""
    mask = x.data > 0
    data = np.where(mask, x.data, 0).astype(x.dtype)

    def rule(g):
        _accumulate(x, g * mask)

    return _node(data, (x,), rule)


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    if x.shape[axis] == 0:
        raise DimensionError(f"softmax over empty axis {axis} of shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accumulate(x, s * (g - dot))

    return _node(s, (x,), rule)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    s = np.exp(data)

    def rule(g):
        _accumulate(x, g - s * g.sum(axis=axis, keepdims=True))

    return _node(data, (x,), rule)


def cross_entropy_from_logits(logits: Tensor, target) -> Tensor:
    """Mean negative log-likelihood of ``target`` under softmax(logits).

    ``logits`` is a single vector (C,) with an integer target, or a batch
    (B, C) with a length-B integer array; the batch result is the mean.
    """
    target = np.asarray(target)
    n_classes = logits.shape[-1]
    if np.any(target < 0) or np.any(target >= n_classes):
        raise IndexError(f"target {target.tolist()} out of range for {n_classes} classes")
    logp = log_softmax(logits, axis=-1)
    if logits.ndim == 1:
        if target.ndim != 0:
            raise DimensionError("a single logit vector takes a scalar target")
        picked = take(logp, (int(target),))
        return mul(picked, -1.0)
    if target.shape != logits.shape[:-1]:
        raise DimensionError(f"targets of shape {target.shape} for logits {logits.shape}")
    picked = take(logp, (np.arange(target.shape[0]), target))
    return mul(mean(picked), -1.0)


def take(x: Tensor, index) -> Tensor:
    """Advanced indexing ``x.data[index]`` with a scatter-add gradient."""
    data = np.asarray(x.data[index])

    def rule(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        _accumulate(x, full)

    return _node(data, (x,), rule)


def l2_normalize_columns(x: Tensor, eps: float = 1e-12, axis: int = -2) -> Tensor:
    """Divide each column (vectors along ``axis``) by max(norm, eps)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    guarded = np.maximum(norm, eps)
    data = x.data / guarded
    active = norm > eps

    def rule(g):
        # d(x/n) = g/n - x (x.g)/n^3 where the norm is not clamped
        proj = (g * data).sum(axis=axis, keepdims=True)
        gx = np.where(active, (g - data * proj) / guarded, g / guarded)
        _accumulate(x, gx)

    return _node(data, (x,), rule)


def frobenius_norm(x: Tensor, axis=None) -> Tensor:
    """sqrt of the sum of squares, over all entries or the given axes.

    The gradient at an all-zero slice is taken as zero.
    """
    axes = _norm_axis(axis, x.ndim)
    sq = (x.data * x.data).sum(axis=axes, keepdims=True)
    norm_k = np.sqrt(sq)
    data = norm_k.reshape(()) if axes is None else np.squeeze(norm_k, axis=axes)

    def rule(g):
        gk = np.asarray(g).reshape(norm_k.shape) if axes is None else np.expand_dims(g, axes)
        safe = np.where(norm_k > 0, norm_k, 1)
        _accumulate(x, np.where(norm_k > 0, gk * x.data / safe, 0))

    return _node(np.asarray(data), (x,), rule)


class GradTape:
    """Reachable operations of a loss in execution order."""

    def __init__(self, loss: Tensor):
        seen = set()
        nodes = []
        stack = [loss]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(p for p in t._parents if p.requires_grad)
        nodes.sort(key=lambda t: t._seq)
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tracked leaf reachable from ``loss``.

    Gradients accumulate additively into leaves; intermediate nodes have
    their buffers released afterwards.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    tape = GradTape(loss)
    interior = [t for t in tape.nodes if t._backward is not None]
    for t in interior:
        t.grad = None
    _accumulate(loss, np.ones_like(loss.data))
    for t in reversed(tape.nodes):
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
    for t in interior:
        t.grad = None


def parameter(data, name=None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)
