from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ParamSet


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamSet, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros_like(params.values), np.zeros_like(params.values),
                   beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: ParamSet, state: AdamState, lr: float, beta1: float | None = None,
              beta2: float | None = None, eps: float | None = None) -> None:
    """One in-place Adam update of ``params.values`` from ``params.grads``."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    b1 = state.beta1 if beta1 is None else beta1
    b2 = state.beta2 if beta2 is None else beta2
    e = state.eps if eps is None else eps
    if state.m.shape != params.values.shape:
        raise ValueError("Adam state is not sized to the parameter set")
    g = params.grads
    state.step += 1
    state.m *= b1
    state.m += (1 - b1) * g
    state.v *= b2
    state.v += (1 - b2) * g * g
    mhat = state.m / (1 - b1 ** state.step)
    vhat = state.v / (1 - b2 ** state.step)
    params.values -= (lr * mhat / (np.sqrt(vhat) + e)).astype(params.dtype, copy=False)
