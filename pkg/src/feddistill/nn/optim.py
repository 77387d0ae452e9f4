from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams, ShapeError


@dataclass
class SgdState:
    """SGD with heavy-ball momentum and L2 weight decay.

    Update, per parameter array ``p`` with gradient ``g``::

        v <- momentum * v + g + weight_decay * p
        p <- p - learning_rate * v
    """

    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    velocity: list[np.ndarray] = field(default_factory=list)


def sgd_step(model: ModelParams, grads: list[np.ndarray], state: SgdState) -> ModelParams:
    """Apply one update in place and return ``model``."""
    arrays = model.arrays()
    if len(grads) != len(arrays):
        raise ShapeError(f"expected {len(arrays)} gradients, got {len(grads)}")
    if not state.velocity:
        state.velocity = [np.zeros_like(a) for a in arrays]
    for i, (p, g, v) in enumerate(zip(arrays, grads, state.velocity)):
        if g.shape != p.shape:
            raise ShapeError(f"gradient {i}: expected shape {p.shape}, got {g.shape}")
        v *= state.momentum
        v += g
        if state.weight_decay:
            v += state.weight_decay * p
        p -= state.learning_rate * v
    return model
