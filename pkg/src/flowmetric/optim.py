"""AdamW with decoupled weight decay, operating on flat parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN or Inf; training must abort."""


@dataclass
class AdamWState:
    """Moment estimates plus hyperparameters for one parameter vector."""

    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)


def adamw_init(n: int, lr: float, weight_decay: float = 0.0,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamWState:
    return AdamWState(lr=lr, weight_decay=weight_decay, beta1=beta1, beta2=beta2,
                      eps=eps, t=0, m=np.zeros(n), v=np.zeros(n))


def adamw_step(state: AdamWState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One update. Decay is decoupled and applied to the pre-update parameters.

    Returns the new parameter vector; the state is advanced in place.
    """
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.shape:
        raise ValueError(f"gradient shape {grad.shape} != params {params.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError("non-finite gradient passed to adamw_step")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return params - state.lr * (m_hat / (np.sqrt(v_hat) + state.eps)) \
        - state.lr * state.weight_decay * params
