"""Decoupled-weight-decay adaptive optimizer (AdamW) over a ModelParams store."""

from __future__ import annotations

import numpy as np

from ..errors import NonFiniteError
from .params import ModelParams

__all__ = ["AdamW", "adamw_step"]


class AdamW:
    def __init__(self, params: ModelParams, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.skipped = 0
        for name, t in params.items():
            if name not in params.opt_state:
                params.opt_state[name] = {
                    "m": np.zeros_like(t.data, dtype=np.float32),
                    "v": np.zeros_like(t.data, dtype=np.float32),
                }

    def zero_grad(self) -> None:
        self.params.zero_grad()

    def step(self) -> None:
        """One bias-corrected update from the accumulated gradients.

        Non-finite gradients abort the whole step: no parameter moves, the
        skip counter increments, and the error surfaces to the caller.
        """
        grads = {}
        for name, t in self.params.items():
            if t.grad is None:
                continue
            if not np.isfinite(t.grad).all():
                self.skipped += 1
                raise NonFiniteError(f"non-finite gradient for {name!r}; step skipped")
            grads[name] = t.grad
        t_step = self.params.step_count + 1
        bc1 = 1.0 - self.beta1 ** t_step
        bc2 = 1.0 - self.beta2 ** t_step
        for name, g in grads.items():
            p = self.params[name]
            state = self.params.opt_state[name]
            g32 = g.astype(np.float32, copy=False)
            state["m"] = self.beta1 * state["m"] + (1.0 - self.beta1) * g32
            state["v"] = self.beta2 * state["v"] + (1.0 - self.beta2) * (g32 * g32)
            m_hat = state["m"] / bc1
            v_hat = state["v"] / bc2
            update = m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.data.dtype)
        self.params.step_count = t_step


def adamw_step(params: ModelParams, grads: dict[str, np.ndarray], lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.01) -> ModelParams:
    """Functional single step: installs the given grads and updates in place."""
    for name, g in grads.items():
        params[name].grad = np.asarray(g, dtype=np.float32)
    opt = AdamW(params, lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                weight_decay=weight_decay)
    opt.step()
    params.zero_grad()
    return params
