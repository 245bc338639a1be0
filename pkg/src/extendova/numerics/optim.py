"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["Adam"]


class Adam:
    """Standard Adam with bias correction.

    Parameters are registered as ``(tensor, lr)`` pairs so that different
    groups (say, a slowly adapted encoder and freshly created heads) can
    run at different rates inside one optimizer.
    """

    def __init__(self, params: list[tuple[Tensor, float]],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not params:
            raise ValueError("optimizer needs at least one parameter")
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p, _ in self.params]
        self._v = [np.zeros_like(p.data) for p, _ in self.params]

    def step(self) -> None:
        """Apply one update from the gradients currently stored on the
        parameters, then clear them.  Parameters with no gradient are
        skipped but still advance the shared timestep."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, (p, lr) in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self._m[i] / bc1
            v_hat = self._v[i] / bc2
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None

    def zero_grad(self) -> None:
        for p, _ in self.params:
            p.grad = None
