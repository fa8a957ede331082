"""Dense tensors with a taped reverse-mode differentiator.

Every op returns a new :class:`Tensor`; when any input requires a gradient the
result records its parents and a closure mapping the output gradient to the
input gradients.  :meth:`Tensor.backward` walks that graph in reverse
topological order.  Parameters with ``trainable=False`` never require a
gradient, so they are treated as constants and never get ``.grad`` storage.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation, generation)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, parents: Sequence["Tensor"] = (), backward_fn: Callable | None = None):
        if isinstance(data, (np.ndarray, np.generic)):
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        self._parents = tuple(parents) if self.requires_grad else ()
        self._backward_fn = backward_fn if self.requires_grad else None
        self._retain = False

    # -- introspection -------------------------------------------------
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

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def retain_grad(self) -> "Tensor":
        """Keep ``.grad`` on this intermediate node after backward."""
        self._retain = True
        return self

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- differentiation -----------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is None:
                # leaf: a trainable Parameter
                node.grad = g if node.grad is None else node.grad + g
                continue
            if node._retain:
                node.grad = g
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


class Parameter(Tensor):
    """A leaf tensor owned by a model; only trainable ones get gradients."""

    def __init__(self, data: np.ndarray, trainable: bool = True):
        super().__init__(np.array(data))
        self.trainable = trainable

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self._trainable = bool(flag)
        self.requires_grad = self._trainable
        if not self._trainable:
            self.grad = None

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Parameter(shape={self.shape}, trainable={self.trainable})"


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
    order.reverse()
    return order


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def tensor(data, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    out = a.data + b.data
    return Tensor(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return Tensor(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, with numpy batch broadcasting."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor(out, (a, b), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return Tensor(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor(a.data[index], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    return Tensor(out, tensors, lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(out, (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def take_rows(source: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of a 2-D ``source`` by an integer array of any shape.

    The gradient scatters back into the touched rows only.
    """
    index = np.asarray(index, dtype=np.int64)
    if source.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-D source, got {source.shape}")
    if index.size and (index.min() < 0 or index.max() >= source.shape[0]):
        raise IndexError(f"row index out of range for table with {source.shape[0]} rows")
    out = source.data[index]

    def backward(g):
        full = np.zeros_like(source.data)
        np.add.at(full, index.reshape(-1), g.reshape(-1, source.shape[1]))
        return (full,)

    return Tensor(out, (source,), backward)


def embed(table: Tensor, ids: Sequence[int] | np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        return Tensor(np.zeros(ids.shape + (table.shape[1],), dtype=table.dtype))
    return take_rows(table, ids)


# ---------------------------------------------------------------------------
# neural-network primitives with fused backward passes
# ---------------------------------------------------------------------------

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the standard normal CDF."""
    cdf = ndtr(x.data)
    out = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * x.data.dtype.type(_INV_SQRT_2PI)
        return (g * (cdf + x.data * pdf),)

    return Tensor(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, x.shape[-1]).sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return Tensor(out, (x, gain, bias), backward)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` False entries get probability 0."""
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor(p, (x,), backward)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """``softmax(q k^T / sqrt(dh)) v`` over ``(..., len, head_dim)`` as one tape node.

    Equal to composing matmul, scale, softmax and matmul, but with in-place
    buffers; ``mask`` False entries get weight 0.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    c = q.data.dtype.type(1.0 / math.sqrt(q.shape[-1]))
    p = q.data @ np.swapaxes(k.data, -1, -2)
    p *= c
    if mask is not None:
        np.copyto(p, -np.inf, where=~np.asarray(mask, dtype=bool))
    p -= p.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v.data

    def backward(g):
        gv = _unbroadcast(np.swapaxes(p, -1, -2) @ g, v.shape) if v.requires_grad else None
        ds = g @ np.swapaxes(v.data, -1, -2)
        ds -= (ds * p).sum(axis=-1, keepdims=True)
        ds *= p
        ds *= c
        gq = _unbroadcast(ds @ k.data, q.shape) if q.requires_grad else None
        gk = _unbroadcast(np.swapaxes(ds, -1, -2) @ q.data, k.shape) if k.requires_grad else None
        return gq, gk, gv

    return Tensor(out, (q, k, v), backward)


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """``-log softmax(logits)[target]`` for one length-K logit vector."""
    k = logits.shape[-1]
    if logits.ndim != 1:
        raise ShapeError(f"expected a 1-D logit vector, got {logits.shape}")
    if not 0 <= target < k:
        raise IndexError(f"target {target} outside [0, {k})")
    logp = log_softmax_np(logits.data)
    out = np.asarray(-logp[target])

    def backward(g):
        grad = np.exp(logp)
        grad[target] -= 1.0
        return (g * grad,)

    return Tensor(out, (logits,), backward)


def masked_token_nll(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Per-sample mean negative log-likelihood over the masked positions.

    ``logits`` is ``(B, L, K)``; ``targets`` and ``mask`` are ``(B, L)``.  Rows
    with ``mask == False`` contribute exactly zero value and exactly zero
    gradient, whatever their target holds.  Returns a ``(B,)`` tensor.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ShapeError(f"logits {logits.shape} vs targets {targets.shape} vs mask {mask.shape}")
    k = logits.shape[-1]
    safe = np.where(mask, targets, 0)
    if np.any((safe < 0) | (safe >= k)):
        raise IndexError("supervised target outside the vocabulary")
    counts = mask.sum(axis=-1)
    if np.any(counts == 0):
        raise ValueError("every sample needs at least one supervised position")
    logp = log_softmax_np(logits.data)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    weights = mask.astype(logits.dtype) / counts[:, None].astype(logits.dtype)
    out = -(picked * weights).sum(axis=-1)

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[..., None],
                          np.take_along_axis(grad, safe[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * (weights * g[:, None])[..., None],)

    return Tensor(out, (logits,), backward)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def numeric_grad(f: Callable[[], float], array: np.ndarray, h: float = 1e-5,
                 indices: Iterable[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central-difference gradient of ``f`` w.r.t. ``array`` (mutated in place)."""
    grad = np.zeros_like(array)
    it = indices if indices is not None else np.ndindex(*array.shape)
    for idx in it:
        orig = array[idx]
        array[idx] = orig + h
        fp = f()
        array[idx] = orig - h
        fm = f()
        array[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
