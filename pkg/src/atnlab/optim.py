"""In-place parameter updates."""

import numpy as np


class SGD:
    """Stochastic gradient descent, optionally with heavy-ball momentum.

    ``sign=+1`` turns it into ascent (used for the adversarially trained
    filter).
    """

    def __init__(self, params, lr, momentum=0.0, sign=-1.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.sign = sign
        self._vel = {k: np.zeros_like(v) for k, v in params.items()} if momentum else None

    def step(self, grads):
        for name, g in grads.items():
            if self._vel is not None:
                v = self._vel[name]
                v *= self.momentum
                v += g
                g = v
            self.params[name] += np.float32(self.sign * self.lr) * g.astype(np.float32, copy=False)


class Adam:
    """Adam with bias correction; used for classifier and filter fitting."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(v) for k, v in params.items()}
        self._v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for name, g in grads.items():
            m, v = self._m[name], self._v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            upd = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            self.params[name] -= upd.astype(np.float32)
