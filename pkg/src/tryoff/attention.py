"""Multi-head self-, cross-, and hybrid attention over token sequences.

The hybrid block is the core conditioning mechanism: a self-attention
branch (frozen inside the denoising network) plus a cross-attention branch
over reference tokens, blended with a runtime `ref_scale` weight in
[0, 1.5]. Both branches consume the *same* projected query tensor (there is
a single query projection in the block), and a shared output projection is
applied after the sum, so `ref_scale = 0` reduces exactly to plain
self-attention.
"""

from __future__ import annotations

import math
from typing import List, Optional

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Parameter, Tensor, add, matmul, reshape, scale, softmax

REF_SCALE_MIN = 0.0
REF_SCALE_MAX = 1.5

MODES = ("self", "hybrid", "cross_only")


def check_ref_scale(value: float) -> float:
    value = float(value)
    if not (REF_SCALE_MIN <= value <= REF_SCALE_MAX):
        raise ConfigError(
            f"reference blend weight must be in [{REF_SCALE_MIN}, {REF_SCALE_MAX}], got {value}")
    return value


class AttentionWeights:
    """Projection weights for one hybrid attention block.

    `wq`, `wk`, `wv`, `wo` form the self branch; `wk_ref`, `wv_ref` project
    reference tokens for the cross branch and are the only weights meant to
    train inside a frozen backbone. `wk_ref`/`wv_ref` are created only when
    `with_ref_branch` is set.
    """

    def __init__(self, rng: np.random.Generator, name: str, d: int,
                 d_ref: Optional[int] = None, head_count: int = 4,
                 with_ref_branch: bool = False):
        if d % head_count != 0:
            raise ConfigError(f"token dim {d} not divisible by head count {head_count}")
        self.d = d
        self.d_ref = d if d_ref is None else d_ref
        self.head_count = head_count
        std = 1.0 / math.sqrt(d)

        def w(suffix, rows):
            return Parameter(f"{name}.{suffix}", rng.normal(0.0, std, size=(rows, d)).astype(np.float32))

        self.wq = w("wq", d)
        self.wk = w("wk", d)
        self.wv = w("wv", d)
        self.wo = w("wo", d)
        self.wk_ref: Optional[Parameter] = None
        self.wv_ref: Optional[Parameter] = None
        if with_ref_branch:
            if self.d_ref == d:
                # warm-start the reference branch from the self branch
                self.wk_ref = Parameter(f"{name}.wk_ref", self.wk.value.data.copy())
                self.wv_ref = Parameter(f"{name}.wv_ref", self.wv.value.data.copy())
            else:
                self.wk_ref = Parameter(
                    f"{name}.wk_ref", rng.normal(0.0, 0.02, size=(self.d_ref, d)).astype(np.float32))
                self.wv_ref = Parameter(
                    f"{name}.wv_ref", rng.normal(0.0, 0.02, size=(self.d_ref, d)).astype(np.float32))

    def params(self) -> List[Parameter]:
        out = [self.wq, self.wk, self.wv, self.wo]
        if self.wk_ref is not None:
            out += [self.wk_ref, self.wv_ref]
        return out


def reference_branch_params(weights: AttentionWeights) -> List[Parameter]:
    """The trainable subset of a hybrid block: exactly the reference K/V."""
    if weights.wk_ref is None:
        return []
    return [weights.wk_ref, weights.wv_ref]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return reshape(x, (b, n, heads, d // heads)).transpose((0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return reshape(x.transpose((0, 2, 1, 3)), (b, n, h * dh))


def _attend(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Softmax(q kᵀ / sqrt(d_head)) v per head, heads re-merged."""
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    d_head = qh.shape[-1]
    logits = scale(matmul(qh, kh.transpose((0, 1, 3, 2))), 1.0 / math.sqrt(d_head))
    probs = softmax(logits, axis=-1)
    return _merge_heads(matmul(probs, vh))


def self_attention(z: Tensor, w: AttentionWeights) -> Tensor:
    """Plain multi-head self-attention with output projection."""
    q = matmul(z, w.wq.value)
    out = _attend(q, matmul(z, w.wk.value), matmul(z, w.wv.value), w.head_count)
    return matmul(out, w.wo.value)


class HybridAttention:
    """Self-attention plus `ref_scale`-weighted cross-attention to reference
    tokens, with a shared query projection.

    mode:
      * ``self``       -- reference tokens ignored; no reference weights exist
      * ``hybrid``     -- self branch + scaled cross branch (the default)
      * ``cross_only`` -- the self branch output is dropped; queries still come
        from the shared projection. Falls back to the self branch when no
        reference tokens are supplied (the unconditional path).
    """

    def __init__(self, rng: np.random.Generator, name: str, d: int,
                 d_ref: Optional[int] = None, head_count: int = 4,
                 mode: str = "hybrid", ref_scale: float = 1.0):
        if mode not in MODES:
            raise ConfigError(f"unknown attention mode {mode!r}; expected one of {MODES}")
        self.mode = mode
        self.ref_scale = check_ref_scale(ref_scale)
        self.weights = AttentionWeights(rng, name, d, d_ref=d_ref, head_count=head_count,
                                        with_ref_branch=(mode != "self"))

    def __call__(self, z: Tensor, ref: Optional[Tensor] = None,
                 ref_scale: Optional[float] = None, trace: Optional[dict] = None) -> Tensor:
        w = self.weights
        lam = self.ref_scale if ref_scale is None else check_ref_scale(ref_scale)
        q = matmul(z, w.wq.value)
        if trace is not None:
            trace["q_self"] = q

        use_ref = ref is not None and self.mode != "self"
        if use_ref:
            if ref.shape[-1] != w.d_ref:
                raise DimensionError(
                    f"reference token dim {ref.shape[-1]} does not match block d_ref {w.d_ref}")
            if ref.shape[1] < 1:
                raise DimensionError("reference token sequence is empty")
            if trace is not None:
                trace["q_cross"] = q
            cross = _attend(q, matmul(ref, w.wk_ref.value), matmul(ref, w.wv_ref.value),
                            w.head_count)
            if self.mode == "cross_only":
                return matmul(cross, w.wo.value)
            self_out = _attend(q, matmul(z, w.wk.value), matmul(z, w.wv.value), w.head_count)
            return matmul(add(self_out, scale(cross, lam)), w.wo.value)

        self_out = _attend(q, matmul(z, w.wk.value), matmul(z, w.wv.value), w.head_count)
        return matmul(self_out, w.wo.value)

    def params(self) -> List[Parameter]:
        return self.weights.params()

    def trainable_reference_params(self) -> List[Parameter]:
        return reference_branch_params(self.weights)


class CrossAttention:
    """Multi-head cross-attention from tokens to conditioning tokens."""

    def __init__(self, rng: np.random.Generator, name: str, d: int, d_cond: int,
                 head_count: int = 4):
        if d % head_count != 0:
            raise ConfigError(f"token dim {d} not divisible by head count {head_count}")
        self.head_count = head_count
        std = 1.0 / math.sqrt(d)
        self.wq = Parameter(f"{name}.wq", rng.normal(0.0, std, size=(d, d)).astype(np.float32))
        self.wk = Parameter(f"{name}.wk", rng.normal(0.0, std, size=(d_cond, d)).astype(np.float32))
        self.wv = Parameter(f"{name}.wv", rng.normal(0.0, std, size=(d_cond, d)).astype(np.float32))
        self.wo = Parameter(f"{name}.wo", rng.normal(0.0, std, size=(d, d)).astype(np.float32))

    def __call__(self, z: Tensor, cond: Tensor) -> Tensor:
        q = matmul(z, self.wq.value)
        out = _attend(q, matmul(cond, self.wk.value), matmul(cond, self.wv.value),
                      self.head_count)
        return matmul(out, self.wo.value)

    def params(self) -> List[Parameter]:
        return [self.wq, self.wk, self.wv, self.wo]
