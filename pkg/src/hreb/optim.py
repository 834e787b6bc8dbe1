"""Adam with standard bias correction, keyed by tensor identity."""

import numpy as np

from .errors import DivergenceError


class AdamState:
    """Per-parameter first/second moment buffers plus the shared step count."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0 or eps <= 0:
            raise ValueError("lr and eps must be positive")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {p.id: np.zeros_like(p.data) for p in params}
        self.v = {p.id: np.zeros_like(p.data) for p in params}

    def step(self, params, grads):
        """Update params in place. Params absent from grads are left untouched."""
        for p in params:
            g = grads.get(p.id)
            if g is not None and not np.all(np.isfinite(g)):
                raise DivergenceError(
                    f"non-finite gradient for parameter {p.name or p.id}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p in params:
            g = grads.get(p.id)
            if g is None:
                continue
            m = self.m[p.id]
            v = self.v[p.id]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(params, grads, state):
    """One optimizer step; returns (params, state) for call-site symmetry."""
    state.step(params, grads)
    return params, state
