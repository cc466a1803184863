"""AdamW and a reduce-on-plateau learning-rate schedule for flat numpy parameters."""
from __future__ import annotations

import numpy as np


class AdamW:
    def __init__(self, lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        """Return updated copies of ``params`` (a list of arrays) given matching ``grads``."""
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        out = []
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            step = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            out.append(p * (1.0 - self.lr * self.weight_decay) - self.lr * step)
        return out


class ReduceLROnPlateau:
    def __init__(self, optimizer, factor=0.7, patience=10):
        self.opt = optimizer
        self.factor = factor
        self.patience = patience
        self.best = np.inf
        self.bad = 0

    def step(self, metric):
        if metric < self.best:
            self.best = metric
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.opt.lr *= self.factor
                self.bad = 0
