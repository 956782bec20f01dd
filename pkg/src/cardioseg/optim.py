"""Adam with bias correction and 1/(1 + decay*t) learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import NumericalError


@dataclass
class AdamState:
    lr: float = 2e-4
    decay: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: list[Tensor],
              grads: list[np.ndarray] | None = None) -> None:
    """One in-place Adam update. Rejects the whole step (state untouched)
    when any gradient value is non-finite."""
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in params]
    if len(grads) != len(params):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if g.shape != p.data.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient values; step rejected")

    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")

    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    lr_t = state.lr / (1.0 + state.decay * t)

    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
