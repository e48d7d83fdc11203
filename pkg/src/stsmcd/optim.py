"""Adaptive-moment optimizer with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class AdamW:
    """Standard bias-corrected moments; weight decay applied directly to the
    parameter, not through the gradient."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 5e-3,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self._v = {k: np.zeros_like(t.data) for k, t in self.params.items()}

    def step(self):
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for key, tensor in self.params.items():
            g = tensor.grad
            m = self._m[key]
            v = self._v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            tensor.data = tensor.data - self.lr * (update + self.weight_decay * tensor.data)

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.zero_grad()
