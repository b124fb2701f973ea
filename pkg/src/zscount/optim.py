"""AdamW with bias-corrected moments and decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class OptimizerState:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    first: list[np.ndarray] = field(default_factory=list)
    second: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: Sequence[Tensor], state: OptimizerState, lr: float, weight_decay: float) -> OptimizerState:
    """Update ``params`` in place from their ``.grad`` (missing grads count as zero).

    The decay ``p <- p - lr * wd * p`` is applied to the pre-update value,
    independently of the adaptive step.
    """
    if not state.first:
        state.first = [np.zeros(p.shape) for p in params]
        state.second = [np.zeros(p.shape) for p in params]
    if len(state.first) != len(params):
        raise ShapeError(f"optimizer state tracks {len(state.first)} tensors, got {len(params)}")
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, m, v in zip(params, state.first, state.second):
        g = p.grad if p.grad is not None else np.zeros(p.shape)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} / moment {m.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data[...] = p.data - lr * weight_decay * p.data - lr * update
    return state
