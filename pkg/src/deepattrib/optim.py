"""Adam with bias correction, as a pure function over explicit state."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from deepattrib.tensor import Tensor


@dataclass(frozen=True)
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, var: Tensor | np.ndarray, **hyper) -> "AdamState":
        arr = var.data if isinstance(var, Tensor) else np.asarray(var)
        return cls(0, np.zeros_like(arr), np.zeros_like(arr), **hyper)


def adam_step(state: AdamState, var: Tensor, grad: Tensor) -> tuple[Tensor, AdamState]:
    """One Adam update. Element-wise, so batched variables update independently."""
    x = var.data if isinstance(var, Tensor) else np.asarray(var)
    g = grad.data if isinstance(grad, Tensor) else np.asarray(grad)
    if not (x.shape == g.shape == state.m.shape == state.v.shape):
        raise ValueError(
            f"adam_step: shape mismatch var {x.shape}, grad {g.shape}, moments {state.m.shape}"
        )
    t = state.step + 1
    dt = x.dtype.type
    m = dt(state.beta1) * state.m + dt(1 - state.beta1) * g
    v = dt(state.beta2) * state.v + dt(1 - state.beta2) * (g * g)
    m_hat = m / dt(1 - state.beta1**t)
    v_hat = v / dt(1 - state.beta2**t)
    new = x - dt(state.lr) * m_hat / (np.sqrt(v_hat) + dt(state.epsilon))
    return Tensor(new.astype(x.dtype, copy=False)), replace(state, step=t, m=m, v=v)
