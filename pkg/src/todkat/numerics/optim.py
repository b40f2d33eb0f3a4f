"""Adam with bias correction, operating on named parameter dicts."""

import numpy as np

from ..errors import ContractError
from .backend import kernels as K


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ContractError("learning rate must be positive")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ContractError("betas must lie in [0, 1)")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {}
        self.v = {}


def adam_step(params, grads, state):
    """Update ``params`` in place from ``grads`` (name -> array).

    Parameters missing from ``grads`` (or mapped to None) are treated as
    having zero gradient: their moments decay but the update for a fresh
    buffer is exactly zero. Shapes are validated against the moment
    buffers created on first sight of each name.
    """
    state.step_count += 1
    t = state.step_count
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ContractError(
                "gradient shape %s does not match parameter %r %s"
                % (g.shape, name, p.shape)
            )
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if m.shape != p.shape:
            raise ContractError(
                "moment shape %s stale for parameter %r %s"
                % (m.shape, name, p.shape)
            )
        K.adam_update(
            p, g, m, v, state.lr, state.beta1, state.beta2, state.eps, t
        )
