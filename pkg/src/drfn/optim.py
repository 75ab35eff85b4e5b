"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import NumericError, ShapeError


class Adam:
    """Adam with bias correction; epsilon sits outside the square root.

    update: theta -= lr * m_hat / (sqrt(v_hat) + eps)
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 2e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        """Apply one update using each parameter's accumulated gradient.

        Parameters that took no part in the loss (grad still None) are
        treated as having zero gradient.
        """
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.data.shape:
                raise ShapeError(
                    f"adam: gradient shape {g.shape} != parameter shape "
                    f"{p.data.shape} for '{name}'")
            if np.isnan(g).any():
                raise NumericError(f"adam: NaN gradient for parameter '{name}'")
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
