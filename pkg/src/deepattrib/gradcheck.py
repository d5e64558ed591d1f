"""Central finite-difference checks for tape gradients.

Checks run in float64: float32 round-off alone is ~6e-8 / h relative, which
swamps a 1e-4 tolerance at h = 1e-3.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from deepattrib.tensor import Tape, Tensor, gradients


def numerical_gradient(
    fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], index: int, h: float = 1e-3
) -> np.ndarray:
    x = np.array(inputs[index], dtype=np.float64)
    grad = np.zeros_like(x)
    args = [Tensor(a, dtype=np.float64) for a in inputs]
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        args[index] = Tensor(x, dtype=np.float64)
        fp = fn(*args).item()
        flat[i] = orig - h
        args[index] = Tensor(x, dtype=np.float64)
        fm = fn(*args).item()
        flat[i] = orig
        grad.reshape(-1)[i] = (fp - fm) / (2 * h)
    return grad


def analytic_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray]) -> list[np.ndarray]:
    with Tape() as tape:
        args = [tape.watch(Tensor(a, dtype=np.float64)) for a in inputs]
        out = fn(*args)
    return [g.numpy() for g in gradients(tape, out, args)]


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest per-coordinate relative error.

    The denominator is floored at 1e-3 of the largest numeric coordinate so
    coordinates whose true gradient is ~0 are judged on an absolute scale.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    floor = max(1e-3 * float(np.max(np.abs(n), initial=0.0)), 1e-12)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom, initial=0.0))


def check_gradients(
    fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-3
) -> list[float]:
    """Max relative error of every input's tape gradient vs finite differences."""
    analytic = analytic_gradients(fn, inputs)
    return [
        max_relative_error(analytic[i], numerical_gradient(fn, inputs, i, h))
        for i in range(len(inputs))
    ]
