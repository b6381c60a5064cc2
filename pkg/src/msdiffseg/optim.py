"""AdamW with decoupled weight decay and a restarting cosine learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, Tensor],
    state: AdamState,
    lr: float,
    wd: float = 0.01,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, Tensor], AdamState]:
    """theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).

    Parameters missing from ``grads`` are treated as having zero gradient.
    Returns fresh parameter tensors and the advanced state.
    """
    if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
        raise ConfigError("beta1 and beta2 must lie in (0, 1)")
    step = state.step + 1
    bc1, bc2 = 1.0 - beta1**step, 1.0 - beta2**step
    new_params, m_out, v_out = {}, {}, {}
    for name, p in params.items():
        theta = p.data
        g = grads.get(name)
        g = np.zeros_like(theta) if g is None else (g.data if isinstance(g, Tensor) else np.asarray(g))
        if g.shape != theta.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps) + wd * theta
        new_params[name] = Tensor(theta - lr * update, requires_grad=p.requires_grad)
        m_out[name], v_out[name] = m, v
    return new_params, AdamState(step, m_out, v_out)


def cosine_lr(epoch: float, lr0: float, period: int, lr_min: float = 0.0) -> float:
    """Cosine decay from lr0 to lr_min, restarting at lr0 every ``period`` epochs."""
    if period < 1:
        raise ConfigError("period must be >= 1")
    phase = (epoch % period) / period
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * phase))
