"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` carrying a
:class:`Node` that remembers its inputs and a closure mapping the output
gradient to input gradients. :func:`backward` sorts the graph reachable from
a scalar loss into a :class:`Tape` and replays it in reverse.

Layout convention: activations are row-major ``(batch, token, feature)``;
weights are ``(in_features, out_features)`` so a linear map is ``x @ W``.

Gradients accumulate into ``leaf.grad``; nothing clears them implicitly
(the optimizer step does). A tape is single-use: replaying a graph whose
saved values were already released raises ``RuntimeError``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Node",
    "Tape",
    "tensor",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "take",
    "sum",
    "mean",
    "square",
    "softmax",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "cross_entropy",
    "backward",
    "finite_diff_grad",
    "relative_error",
]

DEFAULT_DTYPE = np.float64


@dataclass
class Node:
    """One recorded operation: which tensors went in and how to push a gradient back."""

    op: str
    parents: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    __array_ufunc__ = None  # ndarray <op> Tensor defers to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    # construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, parents: tuple["Tensor", ...], bwd) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._node = Node(op, parents, bwd) if out.requires_grad else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def op(self) -> str | None:
        """Name of the operation that produced this tensor (None for leaves)."""
        return self._node.op if self._node is not None else None

    @property
    def parents(self) -> tuple["Tensor", ...]:
        return self._node.parents if self._node is not None else ()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar -------------------------------------------------------

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
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a constant")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(self, axes)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return Tensor._from_op(out, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    return Tensor._from_op(out, "sub", (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, "mul", (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, "neg", (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(ad * ad, "square", (a,), lambda g: (2.0 * ad * g,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return Tensor._from_op(x * cdf, "gelu", (a,), bwd)


# shape manipulation --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast like ``np.matmul``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2 and a.ndim > 2:
        # token-wise linear map: fold leading axes into one GEMM
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])

        def bwd_linear(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return Tensor._from_op((a2 @ bd).reshape(lead + (bd.shape[1],)), "matmul", (a, b), bwd_linear)

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._from_op(ad @ bd, "matmul", (a, b), bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return Tensor._from_op(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(src),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._from_op(np.concatenate([p.data for p in parts], axis=axis), "concat", parts, bwd)


def take(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows along axis 1 per batch item: ``out[b, j] = a[b, index[b, j]]``.

    ``a`` is ``(B, N, ...)`` and ``index`` is an integer array ``(B, K)``.
    """
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 2 or index.shape[0] != a.shape[0]:
        raise ValueError(f"take: index shape {index.shape} incompatible with {a.shape}")
    batch = np.arange(a.shape[0])[:, None]
    src_shape = a.shape

    def bwd(g):
        out = np.zeros(src_shape, dtype=g.dtype)
        np.add.at(out, (batch, index), g)
        return (out,)

    return Tensor._from_op(a.data[batch, index], "take", (a,), bwd)


# reductions ----------------------------------------------------------------


def sum(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor._from_op(np.sum(a.data, axis=axis, keepdims=keepdims), "sum", (a,), bwd)


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# normalisation and attention primitives ------------------------------------


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(y, "softmax", (a,), bwd)


def softmax_rows(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"softmax_rows expects a matrix, got shape {a.shape}")
    return softmax(a)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis with the biased variance, then apply ``gamma * xhat + beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: feature size {d} vs gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bwd(g):
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._from_op(xhat * gd + beta.data, "layer_norm", (x, gamma, beta), bwd)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``(B, C)`` logits against integer labels."""
    labels = np.asarray(labels, dtype=np.intp)
    z = logits.data
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ValueError(f"cross_entropy: logits {z.shape} vs labels {labels.shape}")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(z.shape[0])
    loss = -logp[rows, labels].mean()

    def bwd(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / z.shape[0]),)

    return Tensor._from_op(np.asarray(loss, dtype=z.dtype), "cross_entropy", (logits,), bwd)


# reverse pass --------------------------------------------------------------


@dataclass
class Tape:
    """Topologically ordered tensors reachable from one output."""

    order: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def run(self, output: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(output): seed}
        for t in reversed(self.order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            node = t._node
            if node is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            if node.backward is None:
                raise RuntimeError("tape already consumed: run the forward pass again before backward")
            parent_grads = node.backward(g)
            node.backward = None
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every leaf that ``loss`` depends on and that requires grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad=True")
    tape = Tape.record(loss)
    tape.run(loss, np.ones_like(loss.data))
    return tape


# finite differences --------------------------------------------------------


def finite_diff_grad(f: Callable[[], object], x: Tensor | np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar ``f()`` with respect to ``x``.

    ``x`` is perturbed in place, one element at a time, and restored afterwards,
    so ``f`` must read ``x`` when called.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    arr = x.data if isinstance(x, Tensor) else x
    flat = arr.reshape(-1)
    if not np.shares_memory(flat, arr):
        raise ValueError("finite_diff_grad needs a contiguous array")
    grad = np.zeros(arr.size, dtype=np.float64)

    def value() -> float:
        out = f()
        return float(out.data.reshape(-1)[0]) if isinstance(out, Tensor) else float(out)

    for i in range(arr.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = value()
        flat[i] = orig - h
        fm = value()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(arr.shape)


def relative_error(g_ad: np.ndarray, g_fd: np.ndarray) -> float:
    """Largest elementwise ``|a - b| / (|a| + |b| + 1e-12)``."""
    g_ad = np.asarray(g_ad, dtype=np.float64)
    g_fd = np.asarray(g_fd, dtype=np.float64)
    if g_ad.size == 0:
        return 0.0
    return float(np.max(np.abs(g_ad - g_fd) / (np.abs(g_ad) + np.abs(g_fd) + 1e-12)))
