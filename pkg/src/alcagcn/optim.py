"""Adam with decoupled weight decay, and cosine-annealed learning rates."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, NonFiniteError, Tensor

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def cosine_lr(epoch: int, total_epochs: int, base_lr: float) -> float:
    """``0.5 * base_lr * (1 + cos(pi * epoch / total_epochs))``."""
    if total_epochs <= 0:
        raise ContractError("total_epochs must be positive")
    if not 0 <= epoch <= total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {total_epochs}]")
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * epoch / total_epochs))


@dataclass
class OptimizerState:
    base_lr: float = 1e-3
    weight_decay: float = 1e-6
    total_epochs: int = 100
    current_lr: float = 1e-3
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def set_epoch(self, epoch: int) -> float:
        self.current_lr = cosine_lr(epoch, self.total_epochs, self.base_lr)
        return self.current_lr


def adam_step(params: dict[str, Tensor], state: OptimizerState, grads: dict[str, np.ndarray] | None = None) -> None:
    """One Adam update (bias-corrected) followed by decoupled weight decay.

    ``grads`` defaults to each parameter's ``.grad``. If any gradient is
    non-finite the whole update is rejected and nothing is modified.
    """
    if grads is None:
        grads = {k: p.grad for k, p in params.items()}
    bad = [k for k, g in grads.items() if g is not None and not np.isfinite(g).all()]
    if bad:
        raise NonFiniteError(f"non-finite gradient for {', '.join(sorted(bad))}; update rejected")
    state.step += 1
    t = state.step
    lr = state.current_lr
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + EPS)).astype(p.data.dtype)
        if state.weight_decay:
            p.data -= (lr * state.weight_decay) * p.data
