"""SGD with momentum and bias-corrected Adam, updating tensors in place."""

from __future__ import annotations

import numpy as np

from .core import Tensor


class Optimizer:
    def __init__(self, params, lr: float):
        self.params: list[Tensor] = list(params)
        self.lr = lr
        self.steps = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def _grads(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise RuntimeError(f"parameter {p.name or i} has no gradient")
        return [p.grad for p in self.params]

    def step(self):
        raise NotImplementedError


class SGD(Optimizer):
    """``buf = momentum * buf + g; p -= lr * buf`` (the first step seeds buf with g)."""

    def __init__(self, params, lr: float = 0.001, momentum: float = 0.9):
        super().__init__(params, lr)
        self.momentum = momentum
        self.buffers: list[np.ndarray | None] = [None] * len(self.params)

    def step(self):
        grads = self._grads()
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if self.momentum:
                buf = self.buffers[i]
                if buf is None:
                    buf = self.buffers[i] = np.array(g, dtype=p.data.dtype)
                else:
                    buf *= self.momentum
                    buf += g
                g = buf
            p.data -= (self.lr * g).astype(p.data.dtype)
        self.steps += 1


class Adam(Optimizer):
    def __init__(self, params, lr: float = 0.001, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        grads = self._grads()
        self.steps += 1
        t = self.steps
        c1 = 1 - self.beta1**t
        c2 = 1 - self.beta2**t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= upd.astype(p.data.dtype)
