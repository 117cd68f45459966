"""
Adam optimizer.

State is kept separate from the parameters (AdamState) so it can be written
into checkpoints and restored bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from ..errors import NonFiniteError, ShapeError
from .core import Tensor


@dataclass
class AdamState:
    """First/second moments per parameter name plus the step counter"""
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def hyperparameters(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step}


def adam_step(
    params: Mapping[str, Tensor],
    grads: Optional[Mapping[str, np.ndarray]],
    state: AdamState,
) -> AdamState:
    """
    One bias-corrected Adam update, applied in place to `params`.

    `grads` defaults to each parameter's `.grad`. Parameters without a
    gradient are treated as having a zero gradient so moments stay aligned.
    """
    resolved = {}
    for name, param in params.items():
        grad = grads[name] if grads is not None and name in grads else param.grad
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise ShapeError(f"gradient shape mismatch for {name}", [param.shape, grad.shape])
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError("non-finite gradient", name)
        resolved[name] = grad

    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    for name, param in params.items():
        grad = resolved[name].astype(param.data.dtype, copy=False)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = state.beta1 * m + (1 - state.beta1) * grad
        v = state.beta2 * v + (1 - state.beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        m_hat = m / bias1
        v_hat = v / bias2
        param.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.data.dtype)
    return state
