"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps a numpy array plus an optional gradient buffer. Every
operation that touches a gradient-tracked tensor records itself on an
implicit tape: the output tensor keeps references to its parents and a
closure that pushes the output gradient back to them. ``backward`` walks
that linked structure once in reverse topological order and accumulates
gradients over all paths. Graphs are built per forward pass and become
garbage as soon as the outputs go out of scope.

All arithmetic is float64; there is no broadcasting beyond numpy's own
rules, and gradients of broadcast operands are summed back down to the
operand's shape.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    """A float64 array with an optional grad buffer and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same data with no grad tracking."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the real work lives in the module-level functions.
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # Gradients are never mutated in place, so aliasing a consumer's
    # buffer or a view of it is safe here.
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, -g)

    return _node(-a.data, (a,), backward)


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)

    return _node(out_data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, g / a.data)

    return _node(np.log(a.data), (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g * (0.5 / out_data))

    return _node(out_data, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # exp(-|x|) never overflows; pick the stable branch per sign.
    x = a.data
    e = np.exp(-np.abs(x))
    out_data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), backward)


def gelu(a) -> Tensor:
    """tanh-approximation GELU: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        _accumulate(a, g * local)

    return _node(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and linear algebra


def tsum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gg, a.data.shape).copy())

    return _node(out_data, (a,), backward)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _node(out_data, (a, b), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, g.T)

    return _node(a.data.T, (a,), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along columns."""
    parts = [as_tensor(p) for p in parts]
    widths = [p.data.shape[1] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=1)

    def backward(g):
        offset = 0
        for p, w in zip(parts, widths):
            _accumulate(p, g[:, offset:offset + w])
            offset += w

    return _node(out_data, tuple(parts), backward)


# ---------------------------------------------------------------------------
# composite primitives used by the model


def softmax_rows(a) -> Tensor:
    """Row-wise softmax of a 2-D tensor, stabilized by the row max."""
    a = as_tensor(a)
    x = a.data
    if np.isnan(x).any():
        raise NumericError("softmax_rows: input contains NaN")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=1, keepdims=True)
        _accumulate(a, (g - dot) * out_data)

    return _node(out_data, (a,), backward)


def pairwise_l1(u, w) -> Tensor:
    """D[i, j] = sum_f |u[i, f] - w[j, f]| for row vectors of u and w."""
    u, w = as_tensor(u), as_tensor(w)
    if u.data.shape[1] != w.data.shape[1]:
        raise ShapeError(
            f"pairwise_l1: feature dims differ {u.data.shape} vs {w.data.shape}")
    diff = u.data[:, None, :] - w.data[None, :, :]
    out_data = np.abs(diff).sum(axis=2)

    def backward(g):
        s = np.sign(diff)
        _accumulate(u, np.einsum("ij,ijf->if", g, s))
        _accumulate(w, -np.einsum("ij,ijf->jf", g, s))

    return _node(out_data, (u, w), backward)


def l2_normalize_rows(a) -> Tensor:
    """Scale each row to unit L2 norm; all-zero rows stay zero."""
    a = as_tensor(a)
    x = a.data
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    safe = np.where(norms > 0.0, norms, 1.0)
    out_data = x / safe

    def backward(g):
        dot = (g * out_data).sum(axis=1, keepdims=True)
        _accumulate(a, (g - dot * out_data) / safe)

    return _node(out_data, (a,), backward)


def bilinear_pair(h_n, weights, h_m) -> Tensor:
    """Batched bilinear form: out[z, k] = sum_{l,m} h_n[z,l] * W[l,m,k] * h_m[z,m].

    ``weights`` has shape (L, M, K) where slice [:, :, k] produces output
    column k.
    """
    h_n, weights, h_m = as_tensor(h_n), as_tensor(weights), as_tensor(h_m)
    hn, t, hm = h_n.data, weights.data, h_m.data
    if hn.shape[1] != t.shape[0] or hm.shape[1] != t.shape[1]:
        raise ShapeError(
            f"bilinear_pair: shapes {hn.shape}, {t.shape}, {hm.shape} disagree")
    out_data = np.einsum("zl,lmk,zm->zk", hn, t, hm, optimize=True)

    def backward(g):
        _accumulate(h_n, np.einsum("zk,lmk,zm->zl", g, t, hm, optimize=True))
        _accumulate(h_m, np.einsum("zk,lmk,zl->zm", g, t, hn, optimize=True))
        _accumulate(weights, np.einsum("zl,zm,zk->lmk", hn, hm, g, optimize=True))

    return _node(out_data, (h_n, weights, h_m), backward)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad for every reachable tensor.

    The loss must be scalar. Each node is visited exactly once, in reverse
    topological order; multi-consumer tensors receive the sum of their
    path gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# finite-difference verification


def finite_difference_gradient(f: Callable[[], Tensor], t: Tensor,
                               h: float = 1e-5) -> np.ndarray:
    """Central-differences gradient of the scalar f() w.r.t. t.data."""
    base = t.data
    grad = np.zeros(base.size)
    for i in range(base.size):
        orig = base.flat[i]
        base.flat[i] = orig + h
        f_plus = float(f().data)
        base.flat[i] = orig - h
        f_minus = float(f().data)
        base.flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(base.shape)


def gradient_error(f: Callable[[], Tensor], tensors: Iterable[Tensor],
                   h: float = 1e-5) -> float:
    """Worst relative error between tape and finite-difference gradients.

    Relative error uses a unit floor in the denominator so near-zero
    gradients are compared absolutely.
    """
    tensors = list(tensors)
    for t in tensors:
        t.zero_grad()
    loss = f()
    backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = finite_difference_gradient(f, t, h=h)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        err = float((np.abs(analytic - numeric) / denom).max()) if t.data.size else 0.0
        worst = max(worst, err)
    return worst
