"""AdamW with decoupled weight decay.

Defaults follow the common convention: betas (0.9, 0.999), eps 1e-8,
weight decay 1e-2. Non-trainable parameters are never touched.
"""

from __future__ import annotations

from typing import Dict, Iterable, List

import numpy as np

from .tensor import Parameter


class AdamW:
    def __init__(self, params: Iterable[Parameter], lr: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 1e-2):
        self.params: List[Parameter] = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        if lr is not None:
            self.lr = lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p in self.params:
            if not p.trainable or p.value.grad is None:
                continue
            g = p.value.grad
            m = self._m.get(p.name)
            if m is None:
                m = np.zeros_like(p.value.data)
                v = np.zeros_like(p.value.data)
                self._m[p.name] = m
                self._v[p.name] = v
            else:
                v = self._v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.value.data -= self.lr * (update + self.weight_decay * p.value.data)

    # -- state round-trip for resumable training -----------------------------

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {"opt.step": np.array([self.t], dtype=np.float32)}
        for name, m in self._m.items():
            out[f"opt.m.{name}"] = m
            out[f"opt.v.{name}"] = self._v[name]
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        self.t = int(arrays["opt.step"][0])
        self._m.clear()
        self._v.clear()
        for key, arr in arrays.items():
            if key.startswith("opt.m."):
                self._m[key[len("opt.m."):]] = arr.astype(np.float32).copy()
            elif key.startswith("opt.v."):
                self._v[key[len("opt.v."):]] = arr.astype(np.float32).copy()
