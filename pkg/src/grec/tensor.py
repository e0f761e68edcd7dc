"""Dense float64 tensors with tape-based reverse-mode differentiation.

A graph is recorded as operations run and is released by :func:`backward`.
Broadcasting follows numpy; gradients are summed back to each operand's shape.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "zeros",
    "ones",
    "no_grad",
    "backward",
    "grad_check",
    "matmul",
    "softmax",
    "log_softmax",
    "logsumexp",
    "sigmoid",
    "concat",
    "stack",
    "where",
    "maximum",
    "minimum",
    "layer_norm",
    "DimensionError",
    "ContractError",
    "DomainError",
]

PROB_EPS = 1e-12

_grad_enabled = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class DomainError(ValueError):
    """A function was evaluated outside its finite domain."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    # numpy defers binary ops with ndarray on the left to our reflected methods
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
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
    def T(self) -> "Tensor":
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- graph construction ----------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward_fn: Callable) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- elementwise arithmetic ------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._make(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._make(a.data - b.data, (a, b), bw)

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._make(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

        return Tensor._make(a.data / b.data, (a, b), bw)

    def __rtruediv__(self, other) -> "Tensor":
        return _as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        a = self
        return Tensor._make(-a.data, (a,), lambda g: (-g,))

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        a = self
        p = float(exponent)

        def bw(g):
            return (g * p * a.data ** (p - 1.0),)

        return Tensor._make(a.data**p, (a,), bw)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, idx) -> "Tensor":
        a = self
        if isinstance(idx, Tensor):
            idx = idx.data.astype(np.int64)

        def bw(g):
            out = np.zeros_like(a.data)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._make(a.data[idx], (a,), bw)

    # -- unary functions -------------------------------------------------
    def exp(self) -> "Tensor":
        a = self
        out_data = np.exp(a.data)
        return Tensor._make(out_data, (a,), lambda g: (g * out_data,))

    def log(self) -> "Tensor":
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))

    def sqrt(self) -> "Tensor":
        a = self
        out_data = np.sqrt(a.data)
        return Tensor._make(out_data, (a,), lambda g: (g * 0.5 / out_data,))

    def abs(self) -> "Tensor":
        a = self
        return Tensor._make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))

    def tanh(self) -> "Tensor":
        a = self
        out_data = np.tanh(a.data)
        return Tensor._make(out_data, (a,), lambda g: (g * (1.0 - out_data * out_data),))

    def relu(self) -> "Tensor":
        a = self
        mask = a.data > 0
        return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,))

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def clip(self, lo: float | None = None, hi: float | None = None) -> "Tensor":
        """Clamp values; the gradient passes only where the input was inside the range."""
        a = self
        out_data = np.clip(a.data, lo, hi)
        inside = out_data == a.data
        return Tensor._make(out_data, (a,), lambda g: (g * inside,))

    # -- reductions and shape -------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        elif isinstance(axis, int):
            n = self.shape[axis]
        else:
            n = int(np.prod([self.shape[i] for i in axis]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        if not axes:
            axes = tuple(range(a.ndim))[::-1]
        inv = tuple(np.argsort(axes))
        return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a1: int, a2: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a1], axes[a2] = axes[a2], axes[a1]
        return self.transpose(tuple(axes))

    def unsqueeze(self, axis: int) -> "Tensor":
        shape = list(self.shape)
        if axis < 0:
            axis = len(shape) + 1 + axis
        shape.insert(axis, 1)
        return self.reshape(tuple(shape))

    def broadcast_to(self, shape) -> "Tensor":
        a = self
        return Tensor._make(
            np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),)
        )


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


# -- binary / n-ary ops ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes with numpy batch broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._make(a.data @ b.data, (a, b), bw)


def maximum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    pick_a = a.data >= b.data

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return Tensor._make(np.maximum(a.data, b.data), (a, b), bw)


def minimum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    pick_a = a.data <= b.data

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return Tensor._make(np.minimum(a.data, b.data), (a, b), bw)


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where the constant boolean ``cond`` holds, else from ``b``."""
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=bool)
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g * cond, a.shape), _unbroadcast(g * ~cond, b.shape)

    return Tensor._make(np.where(cond, a.data, b.data), (a, b), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw)


# -- numerically stable nonlinearities --------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    e = np.exp(-np.abs(d))
    out_data = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._make(out_data, (x,), lambda g: (g * out_data * (1.0 - out_data),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if x.ndim == 0:
        raise DimensionError("softmax needs at least one axis")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (out_data * (g - np.sum(g * out_data, axis=axis, keepdims=True)),)

    return Tensor._make(out_data, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out_data = shifted - lse
    probs = np.exp(out_data)

    def bw(g):
        return (g - probs * np.sum(g, axis=axis, keepdims=True),)

    return Tensor._make(out_data, (x,), bw)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    s = np.sum(np.exp(x.data - m), axis=axis, keepdims=True)
    out_keep = m + np.log(s)
    probs = np.exp(x.data - out_keep)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * probs,)

    out_data = out_keep if keepdims else np.squeeze(out_keep, axis=axis)
    return Tensor._make(out_data, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def bw(g):
        gx_hat = g * gamma.data
        gx = inv / n * (
            n * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return Tensor._make(xhat * gamma.data + beta.data, (x, gamma, beta), bw)


# -- differentiation -----------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, int]] = [(root, 0)]
    while stack_:
        node, i = stack_.pop()
        if i == 0:
            if id(node) in seen:
                continue
            seen.add(id(node))
        if i < len(node._parents):
            stack_.append((node, i + 1))
            parent = node._parents[i]
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, 0))
        else:
            order.append(node)
    return order


def backward(root: Tensor, retain_graph: bool = False) -> dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every requires-grad leaf.

    Returns a map from each leaf to its gradient. The recorded graph is released
    afterwards unless ``retain_graph`` is set.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("root is not attached to a differentiation graph")
    order = _topological_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if not retain_graph:
            node._parents = ()
            node._backward = None
    return leaves


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-6,
) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``f`` maps the input tensor(s) to a scalar tensor. Relative error per coordinate
    is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    inputs = [x] if isinstance(x, Tensor) else list(x)
    call = (lambda: f(inputs[0])) if isinstance(x, Tensor) else (lambda: f(*inputs))
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = call()
    if not np.all(np.isfinite(out.data)):
        raise DomainError("f(x) is not finite")
    if out.requires_grad:
        backward(out)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            a_flat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(call().data)
                flat[i] = orig - eps
                fm = float(call().data)
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * eps)
                err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]))
                worst = max(worst, err)
    return worst


def parameters_of(items: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in items if t.requires_grad]
