"""Adam with decoupled weight decay."""

from __future__ import annotations

import numpy as np


class AdamW:
    """AdamW over a dict of named float64 arrays, updated in place.

    ``decay`` selects the names that receive weight decay; everything else is
    plain Adam.
    """

    def __init__(self, params: dict, lr=5e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.1, decay: set | None = None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay = set(params) if decay is None else set(decay)
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if name in self.decay and self.weight_decay:
                p *= 1.0 - lr * self.weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
