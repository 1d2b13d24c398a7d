from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from egofusion.tensor import Parameter


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.9
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_momentum_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: SgdState) -> None:
    """Classic momentum, in place: ``v <- mu*v + g``, ``w <- w - lr*v``.

    Velocities are created lazily (zeros) on the first call. ``None`` grads
    are treated as zero.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads must align")
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    if len(state.velocity) != len(params):
        raise ValueError("velocity does not mirror the parameter list")
    for w, g, v in zip(params, grads, state.velocity):
        if v.shape != w.shape:
            raise ValueError(f"velocity shape {v.shape} != parameter shape {w.shape}")
        v *= state.momentum
        if g is not None:
            if g.shape != w.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {w.shape}")
            v += g
        w -= state.learning_rate * v


def step_parameters(params: Sequence[Parameter], state: SgdState) -> None:
    trainable = [p for p in params if p.requires_grad]
    sgd_momentum_step([p.values for p in trainable], [p.grad for p in trainable], state)
