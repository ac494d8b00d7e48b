"""Small dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays. Every op records its parents and a closure that
pushes the output gradient back to them; ``backward`` walks the graph in
reverse topological order. Leading batch dimensions are allowed wherever the
op is defined row-wise, but broadcasting is limited to adding a vector along
the last axis (``add_bias``) and adding a fixed matrix over trailing axes
(``add_const``).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray)
                                               and data.dtype.kind == "f" else DEFAULT_DTYPE))
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -other)


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


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or DEFAULT_DTYPE), requires_grad=True)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., j] + b[j]."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: {x.shape} vs bias {b.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


def add_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Add a fixed array matching the trailing axes of x (no gradient to c)."""
    if x.shape[x.data.ndim - c.ndim:] != c.shape:
        raise ShapeError(f"add_const: {x.shape} vs {c.shape}")
    return _make(x.data + c, (x,), lambda g: (g,), "add_const")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across a's leading axes) or has the same
    leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    if b.data.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dims {a.shape[:-2]} vs {b.shape[:-2]}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if _needs_grad(a) else None
        gb = None
        if _needs_grad(b):
            if b.data.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row over the last axis, then apply a per-position affine map.

    ``gain`` and ``bias`` have the trailing shape of ``x`` (n, d), so every
    (position, channel) pair owns its own scale and shift.
    """
    if gain.shape != bias.shape or x.shape[x.data.ndim - gain.data.ndim:] != gain.shape:
        raise ShapeError(f"layer_norm: {x.shape} vs gain {gain.shape} / bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.data.ndim - gain.data.ndim))

    def backward(g):
        gx = ggain = gbias = None
        if _needs_grad(x):
            gh = g * gain.data
            d = x.shape[-1]
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / d)
        if _needs_grad(gain):
            ggain = (g * xhat).sum(axis=lead) if lead else g * xhat
        if _needs_grad(bias):
            gbias = g.sum(axis=lead) if lead else g
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), backward, "layer_norm")


def mean_pool_rows(x: Tensor) -> Tensor:
    """Average over the row axis (-2): (..., n, d) -> (..., d)."""
    n = x.shape[-2]

    def backward(g):
        return (np.repeat(np.expand_dims(g, -2), n, axis=-2) / n,)

    return _make(x.data.mean(axis=-2), (x,), backward, "mean_pool")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def mse_loss(pred: Tensor, target) -> Tensor:
    t = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    diff = pred.data - t
    n = diff.size
    return _make(np.asarray((diff * diff).mean()), (pred,), lambda g: (g * 2.0 * diff / n,), "mse")


def masked_identity(x: Tensor, value: np.ndarray, mask: np.ndarray, op: str = "ste") -> Tensor:
    """Forward ``value``; backward passes gradients where ``mask`` holds."""
    return _make(value.astype(x.dtype, copy=False), (x,), lambda g: (g * mask,), op)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
