"""Gradient descent with classical momentum.

Velocity update: v <- momentum * v + (g + weight_decay * w),
parameter update: w <- w - lr * v. Weight decay is plain L2 coupling.
"""

import numpy as np


class SGD:
    def __init__(self, params: dict, lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self._velocity = {
            name: np.zeros_like(p.data)
            for name, p in params.items()
            if p.requires_grad
        }

    def step(self):
        for name, vel in self._velocity.items():
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            vel *= self.momentum
            vel += g
            p.data -= self.lr * vel

    def zero_grad(self):
        for name in self._velocity:
            self.params[name].grad = None
