from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DomainError, TrainingError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 1e-3, dtype=np.float32, **kw) -> AdamState:
        return cls(np.zeros(n, dtype=dtype), np.zeros(n, dtype=dtype), lr=lr, **kw)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Raises:
        TrainingError: on a non-finite gradient (parameters left untouched).
    """
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise DomainError("parameter, gradient and moment vectors must have equal length")
    if not np.isfinite(grads).all():
        raise TrainingError("non-finite gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1 ** state.step)
    v_hat = state.v / (1.0 - b2 ** state.step)
    params -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(params.dtype, copy=False)
    return params, state
