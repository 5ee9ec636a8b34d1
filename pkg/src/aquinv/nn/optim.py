"""Adam with L2 weight decay folded into the gradient, and a plateau learning-rate scheduler."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, params: dict, lr=0.005, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict) -> None:
        """In-place update of every parameter array."""
        self.t += 1
        b1, b2 = self.b1, self.b2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            if self.weight_decay:
                g = g + self.weight_decay * p
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


class PlateauScheduler:
    """Divide the learning rate by ``factor`` once the monitored loss has not
    improved by a relative ``threshold`` for ``patience`` consecutive epochs."""

    def __init__(self, optimizer: Adam, factor=10.0, patience=10, threshold=1e-3, min_lr=0.0):
        if factor <= 1:
            raise ValueError("factor must exceed 1")
        self.opt = optimizer
        self.factor, self.patience, self.threshold, self.min_lr = factor, patience, threshold, min_lr
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, loss: float) -> bool:
        """Record one epoch's loss; returns True if the learning rate was dropped."""
        if loss < self.best * (1.0 - self.threshold):
            self.best = loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            self.opt.lr = max(self.opt.lr / self.factor, self.min_lr)
            self.bad_epochs = 0
            return True
        return False
