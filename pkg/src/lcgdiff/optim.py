"""AdamW with decoupled weight decay over named parameter dicts.

Parameters update in sorted-name order so a training step is one fixed
sequence of array operations regardless of how gradients were produced.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

__all__ = ["AdamWConfig", "AdamWState", "init_adamw", "adamw_step"]


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def init_adamw(named: dict[str, Tensor]) -> AdamWState:
    state = AdamWState()
    for name, tensor in named.items():
        state.m[name] = np.zeros_like(tensor.data)
        state.v[name] = np.zeros_like(tensor.data)
    return state


def adamw_step(
    named: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    config: AdamWConfig,
) -> None:
    """One in-place update. Missing gradient entries count as zero."""
    if set(state.m) != set(named):
        raise ValueError("optimizer state does not match the parameter set")
    state.step += 1
    t = state.step
    bias1 = 1.0 - config.beta1**t
    bias2 = 1.0 - config.beta2**t
    for name in sorted(named):
        param = named[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(param.data)
        if g.shape != param.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {param.data.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        # Decay is decoupled from the adaptive step and applied to all
        # parameters uniformly, norms and biases included.
        param.data *= 1.0 - config.lr * config.weight_decay
        param.data -= config.lr * (m / bias1) / (np.sqrt(v / bias2) + config.eps)
