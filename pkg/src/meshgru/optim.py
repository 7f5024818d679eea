"""Adam with global-norm clipping and a reduce-on-plateau schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import DivergenceError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

PLATEAU_PATIENCE = 3
PLATEAU_FACTOR = 0.5
PLATEAU_REL_THRESHOLD = 1e-4


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int
    lr: float
    plateau_best: float = math.inf
    plateau_bad: int = 0

    @classmethod
    def init(cls, params: list[Tensor], lr: float) -> "OptimizerState":
        return cls(
            m=[np.zeros_like(p.value) for p in params],
            v=[np.zeros_like(p.value) for p in params],
            step=0,
            lr=lr,
        )


def clip_global_norm(grads: list[np.ndarray], max_norm: float = 0.5) -> float:
    """Scale gradients in place so the global L2 norm is at most max_norm."""
    total = 0.0
    for g in grads:
        s = float(np.sum(g * g))
        if not math.isfinite(s):
            raise DivergenceError("non-finite gradient before clipping")
        total += s
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def adam_step(
    params: list[Tensor], grads: list[np.ndarray], state: OptimizerState
) -> None:
    state.step += 1
    bc1 = 1.0 - ADAM_BETA1**state.step
    bc2 = 1.0 - ADAM_BETA2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if not np.all(np.isfinite(update)):
            raise DivergenceError("non-finite Adam update")
        p.value -= update


def plateau_step(state: OptimizerState, val_loss: float) -> bool:
    """Halve the learning rate after >patience evaluations without a
    relative improvement.  Returns True when a halving happened."""
    if not math.isfinite(val_loss):
        raise DivergenceError("non-finite validation loss")
    if val_loss < state.plateau_best * (1.0 - PLATEAU_REL_THRESHOLD):
        state.plateau_best = val_loss
        state.plateau_bad = 0
        return False
    state.plateau_bad += 1
    if state.plateau_bad > PLATEAU_PATIENCE:
        state.lr *= PLATEAU_FACTOR
        state.plateau_bad = 0
        return True
    return False
