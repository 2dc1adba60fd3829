"""Bias-corrected Adam over lists of parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    first_moment: List[np.ndarray]
    second_moment: List[np.ndarray]
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_init(params: Sequence[Tensor], lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999,
              epsilon: float = 1e-8) -> AdamState:
    return AdamState(
        first_moment=[np.zeros_like(p.data) for p in params],
        second_moment=[np.zeros_like(p.data) for p in params],
        lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon,
    )


def adam_step(params: Sequence[Tensor], grads: Optional[Sequence[Optional[np.ndarray]]],
              state: AdamState):
    """One Adam update, in place.  ``grads=None`` reads each ``p.grad``.

    Parameters with a missing gradient are left untouched (their moments
    are not advanced either), so a zero-gradient step is a no-op.
    """
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ValueError("params and grads length mismatch")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            continue
        g = np.asarray(g, dtype=p.data.dtype)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params, state


def zero_grads(params: Sequence[Tensor]):
    for p in params:
        p.grad = None
