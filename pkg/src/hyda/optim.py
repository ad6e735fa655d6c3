"""AdamW with per-group decoupled weight decay."""
from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .numerics import ModelParams


def adamw_step(w, g, m, v, t, lr, betas=(0.9, 0.999), eps=1e-8, decay=0.0):
    """One in-place AdamW update of array ``w``; ``t`` is the 1-based step count."""
    if g.shape != w.shape or m.shape != w.shape or v.shape != w.shape:
        raise ShapeError(f"AdamW: gradient {g.shape} / state shapes do not match parameter {w.shape}")
    b1, b2 = betas
    if decay:
        w *= 1.0 - lr * decay
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    w -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    """Skips parameters that received no gradient in the last backward pass."""

    def __init__(self, params: ModelParams, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, decay=None):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.decay = dict(decay or {})
        self.m = {p.name: np.zeros(p.value.shape) for p in params}
        self.v = {p.name: np.zeros(p.value.shape) for p in params}
        self.t = {p.name: 0 for p in params}

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        for p in self.params:
            g = p.value.grad
            if g is None:
                continue
            self.t[p.name] += 1
            adamw_step(p.value.data, g, self.m[p.name], self.v[p.name], self.t[p.name], lr,
                       self.betas, self.eps, self.decay.get(p.weight_decay_group, 0.0))

    def state_dict(self):
        return {"m": {k: a.copy() for k, a in self.m.items()},
                "v": {k: a.copy() for k, a in self.v.items()},
                "t": dict(self.t)}

    def load_state_dict(self, state):
        for name in self.m:
            self.m[name] = np.array(state["m"][name], dtype=np.float64)
            self.v[name] = np.array(state["v"][name], dtype=np.float64)
            self.t[name] = int(state["t"][name])
