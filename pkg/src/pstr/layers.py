"""Parameter containers and the small building blocks shared by every stage."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class Module:
    """Attribute-walking parameter registry.

    Parameters are ``Tensor`` attributes with ``requires_grad``; sub-modules
    and lists of sub-modules are walked recursively.  Names are dotted
    attribute paths, which is also the checkpoint key format.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
            elif isinstance(val, dict):
                for key in sorted(val):
                    item = val[key]
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, *, bias: bool = True, zero: bool = False, gain: float = 1.0):
        w = np.zeros((d_in, d_out)) if zero else xavier(rng, d_in, d_out, gain)
        self.weight = param(w)
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return nx.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = param(np.ones(d))
        self.bias = param(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    """Stack of linear layers with ReLU between them (none after the last)."""

    def __init__(self, rng, dims: list[int], *, zero_last: bool = False):
        self.layers = [
            Linear(rng, a, b, zero=zero_last and i == len(dims) - 2)
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = nx.relu(x)
        return x


class FeedForward(Module):
    """Post-norm MLP sub-layer: ``norm(x + W2 relu(W1 x))``."""

    def __init__(self, rng, d_model: int, d_hidden: int):
        self.fc1 = Linear(rng, d_model, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_model)
        self.norm = LayerNorm(d_model)

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(x + self.fc2(nx.relu(self.fc1(x))))


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int, *, stride: int = 1, padding: int = 0, zero: bool = False):
        fan_in = c_in * k * k
        if zero:
            w = np.zeros((k, k, c_in, c_out))
        else:
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(k, k, c_in, c_out))
        self.weight = param(w)
        self.bias = param(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return nx.conv2d(x, self.weight, self.bias, self.stride, self.padding)


def sine_embedding(coords: np.ndarray, d: int, temperature: float = 20.0) -> np.ndarray:
    """Fixed sinusoidal embedding of normalized coordinates (..., k) -> (..., d)."""
    k = coords.shape[-1]
    per = d // (2 * k)
    if per < 1:
        raise ValueError(f"embedding width {d} too small for {k} coordinates")
    freqs = temperature ** (np.arange(per) / per)
    ang = coords[..., None] * 2 * math.pi * freqs  # (..., k, per)
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).reshape(*coords.shape[:-1], k * 2 * per)
    if emb.shape[-1] < d:
        pad = np.zeros((*emb.shape[:-1], d - emb.shape[-1]))
        emb = np.concatenate([emb, pad], axis=-1)
    return emb
