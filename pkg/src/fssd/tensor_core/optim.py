"""SGD with momentum, weight decay and per-parameter learning-rate multipliers."""

from __future__ import annotations

from typing import Dict, Mapping, Optional

import numpy as np

from .tensor import Tensor


def sgd_momentum_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    velocity: Dict[str, np.ndarray],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
    lr_multipliers: Optional[Mapping[str, float]] = None,
) -> None:
    """One in-place update of every array in ``params``.

    v <- momentum * v + (grad + weight_decay * param)
    param <- param - lr * multiplier * v
    """
    lr_multipliers = lr_multipliers or {}
    for name, value in params.items():
        if name not in grads or grads[name] is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        g = grads[name] + weight_decay * value if weight_decay else grads[name]
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(value)
        v *= momentum
        v += g
        value -= (lr * lr_multipliers.get(name, 1.0)) * v


class SGD:
    """Stateful wrapper holding the velocity buffers for named parameters."""

    def __init__(
        self,
        named_params: Mapping[str, Tensor],
        momentum: float = 0.9,
        weight_decay: float = 5e-4,
        lr_multipliers: Optional[Mapping[str, float]] = None,
    ):
        self.params = dict(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_multipliers = dict(lr_multipliers or {})
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        sgd_momentum_step(
            {k: p.data for k, p in self.params.items()},
            {k: p.grad for k, p in self.params.items()},
            self.velocity,
            lr,
            self.momentum,
            self.weight_decay,
            self.lr_multipliers,
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
