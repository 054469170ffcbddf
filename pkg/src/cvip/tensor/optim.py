"""Momentum SGD."""
from typing import Dict, List, Sequence

import numpy as np

from ..errors import InputError
from .engine import Tensor


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float,
             momentum: float = 0.0, weight_decay: float = 0.0,
             velocity: List[np.ndarray] = None) -> List[np.ndarray]:
    """One update; returns new parameter arrays and updates ``velocity`` in place.

    g <- grad + wd * p ;  v <- momentum * v + g ;  p <- p - lr * v
    """
    if len(params) != len(grads):
        raise InputError("params and grads differ in length")
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise InputError(f"param {i}: shape {p.shape} != grad shape {g.shape}")
        d = g + weight_decay * p if weight_decay else g
        if momentum:
            if velocity is None:
                raise InputError("momentum needs a velocity buffer list")
            velocity[i] = momentum * velocity[i] + d
            d = velocity[i]
        out.append((p - lr * d).astype(p.dtype, copy=False))
    return out


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        live = [i for i, p in enumerate(self.params) if p.grad is not None]
        vel = [self.velocity[i] for i in live]
        new = sgd_step([self.params[i].data for i in live], [self.params[i].grad for i in live],
                       self.lr, self.momentum, self.weight_decay, vel)
        for j, i in enumerate(live):
            self.params[i].data = new[j]
            self.velocity[i] = vel[j]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state(self) -> Dict[str, float]:
        return {"lr": self.lr, "momentum": self.momentum, "weight_decay": self.weight_decay}
