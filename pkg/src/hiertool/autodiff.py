"""Small dense-tensor library with reverse-mode automatic differentiation.

Each op returns a new :class:`Tensor` that remembers its parents and a
closure computing the parents' gradient contributions. ``backward`` orders
the recorded graph topologically and runs the closures in reverse, summing
contributions into ``.grad``.

Broadcasting is limited to python scalars and a trailing-axis vector
(``x + b`` with ``b.shape == x.shape[-1:]``), which covers every affine map
the model needs and keeps each backward rule short.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference, finite differences)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    # -- bookkeeping ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis: int | None = None) -> Tensor:
        return tsum(self, axis)

    def mean(self, axis: int | None = None) -> Tensor:
        n = self.data.size if axis is None else self.shape[axis]
        return tsum(self, axis) * (1.0 / n)

    def reshape(self, *shape) -> Tensor:
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    # -- reverse sweep -------------------------------------------------------

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topological(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.name = None
    out.op = op
    if _grad_enabled and any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def parameter(data, dtype=np.float64, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True, name=name)


# -- elementwise & structural ops ----------------------------------------------


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    if len(shape) == 1 and g.shape[-1:] == shape:
        return g.reshape(-1, shape[0]).sum(axis=0)
    raise ValueError(f"cannot reduce gradient {g.shape} to {shape}")


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or b.shape == () or a.shape == ():
        return
    if b.ndim == 1 and a.shape[-1:] == b.shape:
        return
    if a.ndim == 1 and b.shape[-1:] == a.shape:
        return
    raise ValueError(f"unsupported broadcast {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    _check_broadcast(a, b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)),
        "add",
    )


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    _check_broadcast(a, b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
        "mul",
    )


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _record(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1 - y * y),), "tanh")


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    y = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record(np.asarray(y), (a,), back, "sum")


def reshape(a: Tensor, shape) -> Tensor:
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError("transpose expects a matrix")
    return _record(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def take(a: Tensor, index) -> Tensor:
    """Basic/advanced indexing; backward scatters into zeros."""
    y = a.data[index]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(np.array(y), (a,), back, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    y = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _record(y, tensors, back, "concat")


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors into a matrix."""
    return concat([reshape(t, (1, -1)) for t in tensors], axis=0)


# -- linear algebra --------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _record(
        a.data @ b.data,
        (a, b),
        lambda g: (matmul_backward_a(g, b.data), matmul_backward_b(a.data, g)),
        "matmul",
    )


def matmul_backward_a(g, b):
    return g @ b.T


def matmul_backward_b(a, g):
    return a.T @ g


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored (in_features, out_features)."""
    y = matmul(x, weight)
    return y if bias is None else y + bias


# -- normalization & activations -------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm width {d} vs gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def back(g):
        dgain = _reduce_to(g * xhat, gain.shape)
        dbias = _reduce_to(g, bias.shape)
        return (layer_norm_backward(g * gain.data, xhat, inv), dgain, dbias)

    return _record(y, (x, gain, bias), back, "layer_norm")


def layer_norm_backward(dxhat, xhat, inv):
    return inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _record(y, (x,), lambda g: (softmax_backward(y, g),), "softmax")


def softmax_backward(y, g):
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    return _record(y, (x,), lambda g: (log_softmax_backward(y, g),), "log_softmax")


def log_softmax_backward(y, g):
    return g - np.exp(y) * g.sum(axis=-1, keepdims=True)


GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    u = GELU_C * (x.data + GELU_A * x.data ** 3)
    t = np.tanh(u)
    y = 0.5 * x.data * (1.0 + t)
    return _record(y, (x,), lambda g: (gelu_backward(x.data, t, g),), "gelu")


def gelu_backward(x, t, g):
    du = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Negative log-likelihood of ``target`` under softmax(logits), 1-D logits."""
    if logits.ndim != 1:
        raise ValueError("cross_entropy expects a 1-D logit vector")
    if not 0 <= target < logits.shape[0]:
        raise ValueError(f"target {target} outside [0, {logits.shape[0]})")
    return -take(log_softmax(logits), target)


# -- attention -------------------------------------------------------------------


class AttentionParams:
    """Projection weights for multi-head attention, all (D, D) plus (D,) biases."""

    names = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")

    def __init__(self, wq, bq, wk, bk, wv, bv, wo, bo):
        self.wq, self.bq, self.wk, self.bk = wq, bq, wk, bk
        self.wv, self.bv, self.wo, self.bo = wv, bv, wo, bo

    def tensors(self) -> list[Tensor]:
        return [getattr(self, n) for n in self.names]


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    params: AttentionParams,
    weights_out: list | None = None,
) -> Tensor:
    """softmax(Q K^T / sqrt(d_head)) V per head, concatenated and projected.

    Self-attention passes the same tensor as ``q``, ``k`` and ``v``.
    ``weights_out`` (optional) collects each head's attention matrix.
    """
    d = q.shape[-1]
    if d % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    qp = linear(q, params.wq, params.bq)
    kp = linear(k, params.wk, params.bk)
    vp = linear(v, params.wv, params.bv)
    scale = 1.0 / math.sqrt(dh)
    outs = []
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        qh, kh, vh = qp[:, cols], kp[:, cols], vp[:, cols]
        attn = softmax(matmul(qh, transpose(kh)) * scale)
        if weights_out is not None:
            weights_out.append(attn.data)
        outs.append(matmul(attn, vh))
    merged = outs[0] if heads == 1 else concat(outs, axis=1)
    return linear(merged, params.wo, params.bo)


# -- optimizer -------------------------------------------------------------------


def sgd_step(
    params: Iterable[Tensor],
    velocity: Iterable[np.ndarray],
    lr: float,
    momentum: float,
) -> None:
    """Heavy-ball SGD in place: ``v = momentum * v + grad``; ``p -= lr * v``."""
    for p, v in zip(params, velocity, strict=True):
        if p.grad is None:
            raise ValueError(f"parameter {p.name or p.shape} has no gradient")
        if v.shape != p.shape:
            raise ValueError(f"velocity {v.shape} does not match parameter {p.shape}")
        v *= momentum
        v += p.grad
        p.data -= (lr * v).astype(p.dtype, copy=False)
