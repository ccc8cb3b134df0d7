"""AdamW with decoupled weight decay and global-norm gradient clipping.

Parameters and gradients travel as flat name-to-array dicts.  Clipping happens
before the moment updates, decay multiplies the pre-step parameter value, and
the selection biases are deliberately absent from the parameter dict (they are
controller state, not learnable weights).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-9
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    """L2 norm over all gradients, accumulated in sorted name order."""
    total = 0.0
    for name in sorted(grads):
        g = grads[name]
        total += float(np.dot(g.ravel(), g.ravel()))
    return float(np.sqrt(total))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Scale all gradients down so the global norm is at most max_norm."""
    norm = global_grad_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
) -> None:
    """One in-place AdamW update at learning rate lr.

    Order of operations: validate, clip by global norm, advance the moments
    with bias correction, then apply decoupled decay plus the Adam step.
    """
    if set(params) != set(grads):
        raise ValueError("params and grads must have identical key sets")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {name}")
    if not np.isfinite(lr) or lr < 0:
        raise ValueError("lr must be finite and non-negative")

    grads = clip_gradients(grads, state.grad_clip)
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name in params:
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        params[name] -= lr * (state.weight_decay * params[name] + m_hat / (np.sqrt(v_hat) + state.eps))
