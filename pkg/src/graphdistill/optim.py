"""Adaptive-moment gradient descent over tensor parameters."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor


class Adam:
    """Bias-corrected adaptive-moment optimizer.

    ``weight_decay`` may be one float for all parameters or one per parameter
    (L2 term added to the raw gradient before the moment updates).
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float | Sequence[float] = 0.0,
    ):
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        if not (0.0 < betas[0] < 1.0 and 0.0 < betas[1] < 1.0):
            raise ContractError(f"moment decay rates must lie in (0,1), got {betas}")
        if eps <= 0:
            raise ContractError(f"eps must be positive, got {eps}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        if isinstance(weight_decay, (int, float)):
            self.weight_decay = [float(weight_decay)] * len(self.params)
        else:
            if len(weight_decay) != len(self.params):
                raise ContractError("one weight_decay entry per parameter expected")
            self.weight_decay = [float(w) for w in weight_decay]
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        """Apply one update from the gradients currently stored on the parameters."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
            if self.weight_decay[i]:
                g = g + self.weight_decay[i] * p.data
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: Adam) -> Adam:
    """Functional form: assign ``grads`` then advance ``state`` by one step."""
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        p.grad = g
    state.step()
    return state
