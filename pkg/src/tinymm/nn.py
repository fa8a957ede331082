"""Parameter containers and transformer building blocks shared by the encoders."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import compute as C
from .compute import Parameter, Tensor

INIT_STD = 0.02


class Module:
    """Walks attributes (in definition order) to find Parameters and submodules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def num_parameters(self, trainable_only: bool = False) -> int:
        return int(sum(p.data.size for p in self.parameters() if p.trainable or not trainable_only))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def normal(rng: np.random.Generator, shape, std: float, dtype) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=shape).astype(dtype))


def zeros(shape, dtype) -> Parameter:
    return Parameter(np.zeros(shape, dtype=dtype))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32,
                 std: float = INIT_STD):
        self.weight = normal(rng, (d_in, d_out), std, dtype)
        self.bias = zeros((d_out,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise C.ShapeError(f"linear expects width {self.weight.shape[0]}, got {x.shape}")
        return C.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32, eps: float = 1e-5):
        self.gain = Parameter(np.ones(d, dtype=dtype))
        self.bias = zeros((d,), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return C.layer_norm(x, self.gain, self.bias, self.eps)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return C.transpose(C.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return C.reshape(C.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def attend(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over ``(..., heads, len, head_dim)`` tensors."""
    return C.attention(q, k, v, mask)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


class SelfAttention(Module):
    def __init__(self, d: int, heads: int, rng, dtype, out_std: float):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(d, 3 * d, rng, dtype)
        self.proj = Linear(d, d, rng, dtype, std=out_std)

    def __call__(self, x: Tensor, causal: bool) -> Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x)
        q = _split_heads(qkv[:, :, :d], self.heads)
        k = _split_heads(qkv[:, :, d:2 * d], self.heads)
        v = _split_heads(qkv[:, :, 2 * d:], self.heads)
        out = attend(q, k, v, causal_mask(n) if causal else None)
        return self.proj(_merge_heads(out))


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng, dtype, out_std: float):
        self.fc = Linear(d, hidden, rng, dtype)
        self.proj = Linear(hidden, d, rng, dtype, std=out_std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.proj(C.gelu(self.fc(x)))


class Block(Module):
    """Pre-norm transformer block: ``x + attn(ln(x))`` then ``x + mlp(ln(x))``."""

    def __init__(self, d: int, heads: int, rng, dtype, depth: int, mlp_ratio: int = 4):
        out_std = INIT_STD / math.sqrt(2 * depth)
        self.ln1 = LayerNorm(d, dtype)
        self.attn = SelfAttention(d, heads, rng, dtype, out_std)
        self.ln2 = LayerNorm(d, dtype)
        self.mlp = FeedForward(d, mlp_ratio * d, rng, dtype, out_std)

    def __call__(self, x: Tensor, causal: bool) -> Tensor:
        x = x + self.attn(self.ln1(x), causal)
        return x + self.mlp(self.ln2(x))
