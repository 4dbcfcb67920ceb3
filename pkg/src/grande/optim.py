"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

__all__ = ["AdamState", "adam_step"]


@dataclass
class AdamState:
    """First/second-moment accumulators plus hyperparameters for one model."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    state: AdamState,
) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Missing gradients count as zero.  Non-finite gradients abort loudly: a
    silent NaN here would poison every later step.
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        else:
            g = np.asarray(g)
            if g.shape != p.data.shape:
                raise ValueError(
                    f"adam_step: gradient shape {g.shape} != parameter shape "
                    f"{p.data.shape} for '{name}'"
                )
            if not np.isfinite(g).all():
                raise FloatingPointError(f"adam_step: non-finite gradient for '{name}'")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state
