"""Small neural-net building blocks composed from tensor primitives."""

from __future__ import annotations

import math
from typing import List

import numpy as np

from .tensor import (Parameter, Tensor, add, conv2d, mul, reshape, rsqrt,
                     scale, shift, square, sum_)


def he_std(fan_in: int) -> float:
    return math.sqrt(2.0 / fan_in)


class Linear:
    def __init__(self, rng: np.random.Generator, name: str, d_in: int, d_out: int,
                 std: float | None = None, bias: bool = True):
        std = he_std(d_in) if std is None else std
        self.w = Parameter(f"{name}.w", rng.normal(0.0, std, size=(d_in, d_out)).astype(np.float32))
        self.b = Parameter(f"{name}.b", np.zeros(d_out, dtype=np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.w.value
        if self.b is not None:
            y = add(y, reshape(self.b.value, (1,) * (y.ndim - 1) + (-1,)))
        return y

    def params(self) -> List[Parameter]:
        return [self.w] + ([self.b] if self.b is not None else [])


class Conv2d:
    def __init__(self, rng: np.random.Generator, name: str, c_in: int, c_out: int,
                 k: int = 3, stride: int = 1, padding: int = 1, std: float | None = None):
        std = he_std(c_in * k * k) if std is None else std
        self.stride, self.padding = stride, padding
        self.w = Parameter(f"{name}.w", rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(np.float32))
        self.b = Parameter(f"{name}.b", np.zeros(c_out, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.w.value, self.stride, self.padding)
        return add(y, reshape(self.b.value, (1, -1, 1, 1)))

    def params(self) -> List[Parameter]:
        return [self.w, self.b]


class GroupNorm:
    """Group normalization over [B,C,H,W], composed from primitives."""

    def __init__(self, name: str, channels: int, groups: int = 8, eps: float = 1e-5):
        assert channels % groups == 0
        self.groups, self.eps = groups, eps
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, dtype=np.float32))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        g = self.groups
        xg = reshape(x, (b, g, (c // g) * h * w))
        mu = xg.mean(axis=2, keepdims=True)
        cen = xg - mu
        var = mean_of_square(cen)
        xn = mul(cen, rsqrt(shift(var, self.eps)))
        xn = reshape(xn, (b, c, h, w))
        return add(mul(xn, reshape(self.gamma.value, (1, -1, 1, 1))),
                   reshape(self.beta.value, (1, -1, 1, 1)))

    def params(self) -> List[Parameter]:
        return [self.gamma, self.beta]


def mean_of_square(x: Tensor) -> Tensor:
    n = x.shape[-1]
    return scale(sum_(square(x), axis=-1, keepdims=True), 1.0 / n)


class LayerNorm:
    """Layer normalization over the last axis of [B,N,d]."""

    def __init__(self, name: str, d: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = Parameter(f"{name}.gamma", np.ones(d, dtype=np.float32))
        self.beta = Parameter(f"{name}.beta", np.zeros(d, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        cen = x - mu
        var = mean_of_square(cen)
        xn = mul(cen, rsqrt(shift(var, self.eps)))
        return add(mul(xn, reshape(self.gamma.value, (1,) * (x.ndim - 1) + (-1,))),
                   reshape(self.beta.value, (1,) * (x.ndim - 1) + (-1,)))

    def params(self) -> List[Parameter]:
        return [self.gamma, self.beta]


def sinusoidal_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Standard sin/cos timestep features, computed outside the graph."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(np.float32)


def tokens_from_map(x: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,H*W,C] token view."""
    b, c, h, w = x.shape
    return reshape(x, (b, c, h * w)).transpose((0, 2, 1))


def map_from_tokens(x: Tensor, h: int, w: int) -> Tensor:
    """[B,N,C] -> [B,C,H,W] with N == H*W."""
    b, n, c = x.shape
    return reshape(x.transpose((0, 2, 1)), (b, c, h, w))
