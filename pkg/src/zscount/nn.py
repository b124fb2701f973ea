"""Parameter containers and the layers shared by the encoders and decoder."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def component_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed by (seed, component name).

    Components draw from independent streams so toggling one part of the
    model never shifts the initial weights of another.
    """
    key = [int(b) for b in name.encode("utf-8")]
    return np.random.default_rng(np.random.SeedSequence([int(seed), *key]))


class Module:
    """Minimal parameter tree: attributes that are Tensors with
    ``requires_grad`` are parameters; Modules and lists of Modules recurse."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{k}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, std: float | None = None):
        std = std if std is not None else 1.0 / np.sqrt(d_in)
        self.weight = T.parameter(rng.standard_normal((d_in, d_out)) * std)
        self.bias = T.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = T.parameter(np.ones(d))
        self.bias = T.parameter(np.zeros(d))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self._eps)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, bias: bool = True, gain: float = np.sqrt(2.0)):
        std = gain / np.sqrt(c_in * k * k)
        self.weight = T.parameter(rng.standard_normal((c_out, c_in, k, k)) * std)
        self.bias = T.parameter(np.zeros(c_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias)


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.qkv = Linear(d, 3 * d, rng)
        self.out = Linear(d, d, rng, std=0.5 / np.sqrt(d))
        self._heads = heads

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        b, n, d = x.shape
        h = self._heads
        dh = d // h
        qkv = self.qkv(x).reshape(b, n, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
        if mask is not None:
            scores = scores + T.tensor(mask)
        attn = T.softmax(scores, axis=-1)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.out(ctx)


class TransformerBlock(Module):
    """Pre-norm attention + GELU MLP block."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.fc1 = Linear(d, mlp_ratio * d, rng)
        self.fc2 = Linear(mlp_ratio * d, d, rng, std=0.5 / np.sqrt(mlp_ratio * d))

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), mask)
        return x + self.fc2(T.gelu(self.fc1(self.ln2(x))))
