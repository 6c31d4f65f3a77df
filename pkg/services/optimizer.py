# services/optimizer.py

from typing import Dict

import numpy as np

from services.autograd import Tensor
from utils.error_handler import DimensionError


class AdamState:
    """Adam without weight decay; one first/second moment pair per named parameter."""

    def __init__(
        self,
        params: Dict[str, Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        correction1 = 1.0 - self.beta1 ** t
        correction2 = 1.0 - self.beta2 ** t
        for name, param in self.params.items():
            grad = param.grad
            if grad is None:
                continue
            if grad.shape != param.data.shape:
                raise DimensionError(f"gradient shape mismatch for '{name}'", shapes=(grad.shape, param.data.shape))
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad * grad
            update = self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            param.data = (param.data - update).astype(param.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()
