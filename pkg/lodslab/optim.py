from typing import List, Sequence

import numpy as np

from lodslab.gradcore import Tensor


class Optimizer:
    def __init__(self, params: Sequence[Tensor], lr: float):
        if lr <= 0:
            raise ValueError(f"Learning rate must be positive, got {lr}")
        self.params: List[Tensor] = list(params)
        self.lr = float(lr)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        raise NotImplementedError


class SGD(Optimizer):
    """Plain SGD with optional heavy-ball momentum."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        super().__init__(params, lr)
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"Momentum must lie in [0, 1), got {momentum}")
        self.momentum = momentum
        self._velocity = [None] * len(self.params)

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            update = p.grad
            if self.momentum:
                v = self._velocity[i]
                v = update if v is None else self.momentum * v + update
                self._velocity[i] = v
                update = v
            # rebind rather than mutate: detached views of the old value stay valid
            p.data = (p.data - self.lr * update).astype(p.dtype, copy=False)


class Adam(Optimizer):
    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def step(self):
        self._t += 1
        c1 = 1.0 - self.beta1**self._t
        c2 = 1.0 - self.beta2**self._t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self._m[i] = self.beta1 * self._m[i] + (1 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1 - self.beta2) * g * g
            m_hat = self._m[i] / c1
            v_hat = self._v[i] / c2
            p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype, copy=False)


def make_optimizer(kind: str, params: Sequence[Tensor], lr: float, momentum: float = 0.0) -> Optimizer:
    if kind == "sgd":
        return SGD(params, lr, momentum=momentum)
    if kind == "adam":
        return Adam(params, lr)
    raise ValueError(f"Unknown optimizer '{kind}', expected 'sgd' or 'adam'")
