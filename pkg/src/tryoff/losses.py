"""Training losses: the denoising MSE, a deep-feature perceptual distance,
and their weighted total.

`FeatureNet` is a fixed, seeded conv stack standing in for a pretrained
feature extractor: three stride-2 stages with taps after each activation.
It is shared with the metrics module (perceptual distance there is the same
math, and the distribution metrics pool its final-tap embeddings). It never
trains.
"""

from __future__ import annotations

from typing import List, Sequence, Union

import numpy as np

from .errors import DimensionError
from .tensor import (Parameter, Tensor, add, conv2d, mean_, mul, reshape,
                     rsqrt, scale, shift, silu, square, sum_, no_grad)

_FEATURE_SEED = 1309
PERCEPTUAL_WEIGHT_DEFAULT = 0.05


class FeatureNet:
    """Frozen seeded 3-stage conv stack with per-stage taps.

    Channels 16/32/64 at strides 2/2/2; taps are taken after each SiLU.
    """

    stages = ((3, 16), (16, 32), (32, 64))

    def __init__(self, seed: int = _FEATURE_SEED):
        rng = np.random.default_rng(seed)
        self.kernels: List[Parameter] = []
        self.biases: List[Parameter] = []
        for i, (cin, cout) in enumerate(self.stages):
            std = np.sqrt(2.0 / (cin * 9))
            k = Parameter(f"featnet.conv{i}.w",
                          rng.normal(0.0, std, size=(cout, cin, 3, 3)).astype(np.float32),
                          trainable=False)
            b = Parameter(f"featnet.conv{i}.b",
                          rng.normal(0.0, 0.05, size=cout).astype(np.float32),
                          trainable=False)
            self.kernels.append(k)
            self.biases.append(b)

    def taps(self, x: Union[Tensor, np.ndarray]) -> List[Tensor]:
        """Feature maps after each stage for [B,3,H,W] input in [-1,1]."""
        h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        if h.ndim != 4 or h.shape[1] != 3:
            raise DimensionError(f"expected [B,3,H,W] image tensor, got {h.shape}")
        out = []
        for k, b in zip(self.kernels, self.biases):
            h = add(conv2d(h, k.value, stride=2, padding=1),
                    reshape(b.value, (1, -1, 1, 1)))
            h = silu(h)
            out.append(h)
        return out

    def embed(self, x: np.ndarray) -> np.ndarray:
        """Final-tap global-average-pool embedding, [B,64]; no graph built."""
        with no_grad():
            f = self.taps(np.asarray(x, dtype=np.float32))[-1]
        return f.data.mean(axis=(2, 3))

    def params(self) -> List[Parameter]:
        return self.kernels + self.biases


def _unit_normalize(f: Tensor) -> Tensor:
    """Scale each spatial position's channel vector to unit L2 norm."""
    nrm = rsqrt(shift(sum_(square(f), axis=1, keepdims=True), 1e-10))
    return mul(f, nrm)


def ldm_loss(pred: Union[Tensor, np.ndarray], target: Union[Tensor, np.ndarray]) -> Tensor:
    """Mean squared error over all elements."""
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float32))
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise DimensionError(f"loss operand shapes differ: {pred.shape} vs {target.shape}")
    return mean_(square(pred - target))


def perceptual_loss(x: Union[Tensor, np.ndarray], y: Union[Tensor, np.ndarray],
                    net: FeatureNet) -> Tensor:
    """Sum over taps of the spatial mean of channel-summed squared
    differences between unit-normalized feature maps."""
    fx = net.taps(x)
    fy = net.taps(y)
    if fx[0].shape != fy[0].shape:
        raise DimensionError("perceptual loss inputs have different shapes")
    total = None
    for a, b in zip(fx, fy):
        d = _unit_normalize(a) - _unit_normalize(b)
        term = mean_(sum_(square(d), axis=1))
        total = term if total is None else add(total, term)
    return total


def total_loss(l_ldm: Union[Tensor, float], l_perceptual: Union[Tensor, float],
               weight: float = PERCEPTUAL_WEIGHT_DEFAULT):
    """Denoising loss plus `weight` times the perceptual term."""
    if isinstance(l_ldm, Tensor) or isinstance(l_perceptual, Tensor):
        lp = l_perceptual if isinstance(l_perceptual, Tensor) else Tensor(np.float32(l_perceptual))
        return add(l_ldm, scale(lp, weight))
    return l_ldm + weight * l_perceptual
