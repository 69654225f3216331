"""Layers, parameter registries and the Adam optimizer on top of ``autograd``."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor


class Module:
    """Parameter container; parameters are discovered by attribute walk.

    Names are dotted attribute paths, which is what checkpoints store.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key in sorted(vars(self)):
            value = vars(self)[key]
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=ag.DTYPE)
            if arr.shape != p.shape:
                raise ag.ShapeError(f"{name}: checkpoint shape {arr.shape} != {p.shape}")
            p.data[...] = arr


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(_xavier(rng, d_in, d_out, (d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ag.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.up = Linear(d, hidden, rng)
        self.down = Linear(hidden, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ag.gelu(self.up(x)))


class MultiHeadAttention(Module):
    """Multi-head scaled dot-product attention that exposes its head maps.

    ``inject`` (B, n_q, n_k), when given, is added to every post-softmax head
    map scaled by ``sigma``; rows are then renormalised over the real keys
    unless ``renorm`` is False.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ag.ConfigError(f"width {d} is not divisible by {heads} heads")
        self.heads = heads
        self.d = d
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)

    def _split(self, x: Tensor) -> Tensor:
        B, n, _ = x.shape
        return ag.transpose(ag.reshape(x, (B, n, self.heads, self.d // self.heads)), (0, 2, 1, 3))

    def __call__(self, xq: Tensor, xkv: Tensor, key_mask: np.ndarray,
                 inject: Tensor | None = None, sigma: Tensor | None = None,
                 renorm: bool = True) -> tuple[Tensor, Tensor]:
        B, nq, _ = xq.shape
        dk = self.d // self.heads
        q, k, v = self._split(self.q(xq)), self._split(self.k(xkv)), self._split(self.v(xkv))
        scores = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dk))
        km = key_mask[:, None, None, :]
        att = ag.softmax(scores, axis=-1, mask=km)
        if inject is not None:
            extra = ag.reshape(inject, (B, 1, nq, -1)) * km * sigma
            fused = att + extra
            if renorm:
                # softmax rows already sum to 1, so the row total is 1 + sum(extra);
                # sigma = 0 then divides by exactly 1. Fully masked rows stay zero.
                att = fused / (ag.tsum(extra, -1, keepdims=True) + 1.0)
            else:
                att = fused
        ctx = ag.matmul(att, v)
        ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (B, nq, self.d))
        return self.o(ctx), ag.mean(att, axis=1)


class EncoderLayer(Module):
    """Pre-norm transformer block."""

    def __init__(self, d: int, heads: int, ff_hidden: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.norm2 = LayerNorm(d)
        self.ff = FeedForward(d, ff_hidden, rng)

    def __call__(self, x: Tensor, mask: np.ndarray, inject=None, sigma=None, renorm=True):
        h = self.norm1(x)
        a, amap = self.attn(h, h, mask, inject, sigma, renorm)
        x = x + a
        x = x + self.ff(self.norm2(x))
        return x, amap


class Adam:
    """Adam with bias correction; state is exposed for checkpointing."""

    def __init__(self, params: list[tuple[str, Parameter]], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros(p.shape) for name, p in params}
        self.v = {name: np.zeros(p.shape) for name, p in params}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None
