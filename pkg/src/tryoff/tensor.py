"""Dense tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a row-major numpy float32 array. Differentiable primitives
record a backward closure on their output; `backward(loss)` topologically
sorts the recorded operations reachable from the loss and sweeps them once
in reverse. The primitive set is deliberately small: matmul, conv2d,
elementwise add/mul (plus the unary tanh/exp/rsqrt needed by the decoder
bound, the VAE KL term, and feature normalization), softmax, silu,
reshape/transpose, nearest-neighbor upsampling, and sum/mean reductions.
Group/layer normalization are composed from these in `layers`.

Gradients only flow where they are needed: an op records itself only if
grad mode is enabled and at least one input requires grad, so forward
passes through frozen networks build no graph.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError

# per-context flag so threads running separate model instances don't
# interfere with each other's grad mode
_GRAD_ENABLED = contextvars.ContextVar("tryoff_grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / evaluation)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


class Tensor:
    """A dense n-dimensional float array plus optional autodiff bookkeeping.

    `data` is always a contiguous numpy array (float32 by default; tests may
    pass float64 to sharpen finite-difference oracles). `grad` is populated
    by `backward` for tensors with `requires_grad=True`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = data.dtype if (isinstance(data, np.ndarray)
                                   and data.dtype in (np.float32, np.float64)) else np.float32
        arr = np.asarray(data, dtype=dtype)
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op: str = "leaf"

    # -- basic introspection ------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), scale(self, -1.0))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not a primitive; use rsqrt/mul")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)


TensorLike = Union[Tensor, np.ndarray, float, int, list]


def as_tensor(x: TensorLike, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=False, dtype=dtype)


def _finite_or_raise(arr: np.ndarray, op: str) -> None:
    # cheap guard used only by tests via check_finite(); hot path stays clean
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"non-finite values produced by {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _GRAD_ENABLED.get() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _reduce_to(arr: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out broadcast dimensions so `arr` collapses back to `shape`."""
    if arr.shape == shape:
        return arr
    while arr.ndim > len(shape):
        arr = arr.sum(axis=0)
    for ax, (have, want) in enumerate(zip(arr.shape, shape)):
        if want == 1 and have != 1:
            arr = arr.sum(axis=ax, keepdims=True)
    return arr


def _accum(t: Tensor, g: np.ndarray, fresh: bool = False) -> None:
    """Accumulate a gradient contribution.

    `fresh=True` promises `g` is a newly allocated array no other node will
    see again, so it can be stored without copying; forwarded or view
    gradients (residual adds, reshapes) must keep the default copying path.
    """
    if not t.requires_grad:
        return
    red = _reduce_to(g, t.data.shape)
    if red is not g:
        fresh = True
    g = red
    if t.grad is None:
        if fresh and g.dtype == t.data.dtype:
            t.grad = g
        else:
            t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


# -- elementwise -------------------------------------------------------------


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    data = a.data + b.data

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _make(data, (a, b), bw, "add")


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    data = a.data * b.data

    def bw(g):
        _accum(a, g * b.data, fresh=True)
        _accum(b, g * a.data, fresh=True)

    return _make(data, (a, b), bw, "mul")


def scale(a: TensorLike, s) -> Tensor:
    """Multiply by a constant scalar or constant array (no gradient into `s`)."""
    a = as_tensor(a)
    s_arr = np.asarray(s, dtype=a.dtype)
    data = a.data * s_arr

    def bw(g):
        _accum(a, g * s_arr, fresh=True)

    return _make(data, (a,), bw, "scale")


def shift(a: TensorLike, c) -> Tensor:
    """Add a constant scalar or constant array (no gradient into `c`)."""
    a = as_tensor(a)
    c_arr = np.asarray(c, dtype=a.dtype)
    data = a.data + c_arr

    def bw(g):
        _accum(a, g)

    return _make(data, (a,), bw, "shift")


def silu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    x = a.data
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.clip(x, 0, None))),
                   np.exp(np.clip(x, None, 0)) / (1.0 + np.exp(np.clip(x, None, 0))))
    sig = sig.astype(a.dtype)
    data = x * sig

    def bw(g):
        _accum(a, g * (sig * (1.0 + x * (1.0 - sig))), fresh=True)

    return _make(data, (a,), bw, "silu")


def tanh(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - data * data), fresh=True)

    return _make(data, (a,), bw, "tanh")


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def bw(g):
        _accum(a, g * data, fresh=True)

    return _make(data, (a,), bw, "exp")


def rsqrt(a: TensorLike) -> Tensor:
    """Elementwise x**-0.5; callers are responsible for keeping x positive."""
    a = as_tensor(a)
    data = 1.0 / np.sqrt(a.data)

    def bw(g):
        _accum(a, g * (-0.5 * data ** 3), fresh=True)

    return _make(data, (a,), bw, "rsqrt")


def square(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    data = a.data * a.data

    def bw(g):
        _accum(a, g * (2.0 * a.data), fresh=True)

    return _make(data, (a,), bw, "square")


# -- shape ops ----------------------------------------------------------------


def reshape(a: TensorLike, shape: tuple) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    data = a.data.reshape(shape)

    def bw(g):
        _accum(a, g.reshape(old))

    return _make(data, (a,), bw, "reshape")


def transpose(a: TensorLike, axes: Optional[tuple] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))

    def bw(g):
        _accum(a, g.transpose(inv))

    return _make(data, (a,), bw, "transpose")


def upsample_nearest(a: TensorLike, factor: int) -> Tensor:
    """Nearest-neighbor spatial upsampling of a [B,C,H,W] tensor."""
    a = as_tensor(a)
    if a.ndim != 4:
        raise DimensionError(f"upsample_nearest expects [B,C,H,W], got {a.shape}")
    k = int(factor)
    data = a.data.repeat(k, axis=2).repeat(k, axis=3)
    b, c, h, w = a.shape

    def bw(g):
        _accum(a, g.reshape(b, c, h, k, w, k).sum(axis=(3, 5)), fresh=True)

    return _make(data, (a,), bw, "upsample_nearest")


# -- reductions ---------------------------------------------------------------


def sum_(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.data.shape

    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, in_shape).astype(a.dtype))
            return
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g, in_shape).astype(a.dtype))

    return _make(np.asarray(data, dtype=a.dtype), (a,), bw, "sum")


def mean_(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- softmax ------------------------------------------------------------------


def softmax(a: TensorLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not (-a.ndim <= axis < a.ndim):
        raise DimensionError(f"softmax axis {axis} invalid for rank {a.ndim}")
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - dot), fresh=True)

    return _make(data, (a,), bw, "softmax")


# -- matmul -------------------------------------------------------------------


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """Batched matrix product [..., m, k] @ [..., k, n] with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul requires rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def bw(g):
        _accum(a, np.matmul(g, b.data.swapaxes(-1, -2)), fresh=True)
        _accum(b, np.matmul(a.data.swapaxes(-1, -2), g), fresh=True)

    return _make(data, (a, b), bw, "matmul")


# -- conv2d -------------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c, _, _ = x.shape
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(b, c * kh * kw, ho * wo)


def conv2d(x: TensorLike, kernel: TensorLike, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [B,C,H,W] with [C',C,kh,kw] kernels."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    b, c, h, w = x.shape
    co, ci, kh, kw = kernel.shape
    if c != ci:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    s, p = int(stride), int(padding)
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d output would be empty: input {x.shape}, kernel {kernel.shape}, stride={s}, padding={p}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, kh, kw, s, ho, wo)                       # [B, C*kh*kw, Ho*Wo]
    wmat = kernel.data.reshape(co, ci * kh * kw)
    data = np.matmul(wmat[None], cols).reshape(b, co, ho, wo)

    def bw(g):
        gm = g.reshape(b, co, ho * wo)
        if kernel.requires_grad:
            dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(co, ci, kh, kw)
            _accum(kernel, dw, fresh=True)
        if x.requires_grad:
            dcols = np.matmul(wmat.T[None], gm).reshape(b, ci, kh, kw, ho, wo)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, i, j]
            _accum(x, dxp[:, :, p:p + h, p:p + w] if p else dxp, fresh=True)

    return _make(data, (x, kernel), bw, "conv2d")


# -- parameters ---------------------------------------------------------------


class Parameter:
    """A named model weight: value tensor, trainable flag, optional gradient.

    `trainable=False` keeps the value bit-identical across optimizer steps and
    suppresses gradient accumulation on it (gradients still flow *through* it
    to upstream tensors).
    """

    __slots__ = ("name", "value", "_trainable")

    def __init__(self, name: str, value, trainable: bool = True, dtype=np.float32):
        self.name = name
        self.value = value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)
        self.value.requires_grad = bool(trainable)
        self._trainable = bool(trainable)

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self._trainable = bool(flag)
        self.value.requires_grad = self._trainable

    @property
    def gradient(self) -> Optional[np.ndarray]:
        return self.value.grad

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def zero_grad(self) -> None:
        self.value.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def set_trainable(params: Iterable[Parameter], flag: bool) -> None:
    for p in params:
        p.trainable = flag


# -- reverse sweep ------------------------------------------------------------


class ComputationRecord:
    """The recorded ops reachable from one output, in topological order.

    `visits` counts backward invocations per node so tests can assert the
    single-visit invariant.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes
        self.visits = 0

    @classmethod
    def trace(cls, output: Tensor) -> "ComputationRecord":
        order: list = []
        seen = set()
        stack = [(output, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def sweep(self, output: Tensor) -> None:
        output.grad = np.ones_like(output.data)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                self.visits += 1


def backward(loss: Tensor, record: Optional[ComputationRecord] = None) -> ComputationRecord:
    """Populate gradients of everything `loss` depends on.

    Raises ContractError for a non-scalar loss. Returns the record so callers
    can inspect the swept op list.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if record is None:
        record = ComputationRecord.trace(loss)
    record.sweep(loss)
    return record


def check_finite(*tensors: Tensor) -> None:
    """Assert-style guard used by tests: all data and grads finite."""
    for t in tensors:
        _finite_or_raise(t.data, t.op)
        if t.grad is not None:
            _finite_or_raise(t.grad, t.op + ".grad")
