"""Small neural-network layers and an Adam optimizer on top of :mod:`grec.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import Tensor, layer_norm, softmax

NEG_INF = -1e9


class Module:
    """Parameter container. Children and parameters register by attribute assignment."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, v in enumerate(value):
                self._children[f"{name}.{i}"] = v
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in own.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data[...] = arr

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def param(array) -> Tensor:
    return Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, fan_in: int, fan_out: int, bias: bool = True):
        super().__init__()
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        self.weight = param(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        self.bias = param(np.zeros(fan_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    def __init__(self, rng, dims: list[int]):
        super().__init__()
        self.layers = [Linear(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.relu()
        return x


def key_padding_bias(valid: np.ndarray) -> np.ndarray:
    """``(B, Lk)`` validity mask to an additive ``(B, 1, 1, Lk)`` attention bias."""
    return np.where(valid, 0.0, NEG_INF)[:, None, None, :]


class MultiHeadAttention(Module):
    def __init__(self, rng, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"embed dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.out = Linear(rng, dim, dim)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, query: Tensor, key_value: Tensor, bias: np.ndarray | None = None,
                 return_weights: bool = False):
        b, nq, dim = query.shape
        q = self._split(self.q(query))
        k = self._split(self.k(key_value))
        v = self._split(self.v(key_value))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.head_dim))
        if bias is not None:
            scores = scores + bias
        weights = softmax(scores, axis=-1)
        ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(b, nq, dim)
        out = self.out(ctx)
        return (out, weights) if return_weights else out


class FeedForward(Module):
    def __init__(self, rng, dim: int, hidden: int):
        super().__init__()
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).relu())


class EncoderLayer(Module):
    """Pre-norm self-attention block."""

    def __init__(self, rng, dim: int, heads: int, ffn: int):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(rng, dim, heads)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(rng, dim, ffn)

    def __call__(self, x: Tensor, bias: np.ndarray | None) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, bias)
        return x + self.ffn(self.norm2(x))


class DecoderLayer(Module):
    """Pre-norm query self-attention, cross-attention to memory, feed-forward."""

    def __init__(self, rng, dim: int, heads: int, ffn: int, self_attention: bool = True):
        super().__init__()
        self.has_self = self_attention
        if self_attention:
            self.norm_self = LayerNorm(dim)
            self.self_attn = MultiHeadAttention(rng, dim, heads)
        self.norm_cross = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(rng, dim, heads)
        self.norm_ffn = LayerNorm(dim)
        self.ffn = FeedForward(rng, dim, ffn)

    def __call__(self, x: Tensor, memory: Tensor, memory_bias: np.ndarray | None) -> Tensor:
        if self.has_self:
            h = self.norm_self(x)
            x = x + self.self_attn(h, h)
        x = x + self.cross_attn(self.norm_cross(x), memory, memory_bias)
        return x + self.ffn(self.norm_ffn(x))


class Adam:
    """Adam with bias correction and no learning-rate schedule."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> dict:
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for dst, src in zip(self.m, state["m"]):
            dst[...] = src
        for dst, src in zip(self.v, state["v"]):
            dst[...] = src
