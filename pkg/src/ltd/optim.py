"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError


@dataclass
class AdamState:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def fresh(cls, params, **hyper):
        state = cls(**hyper)
        state.m = [np.zeros_like(_arr(p)) for p in params]
        state.v = [np.zeros_like(_arr(p)) for p in params]
        return state


def _arr(p):
    return p if isinstance(p, np.ndarray) else p.data


def adam_step(params, grads, state):
    """One in-place Adam update of ``params`` (arrays or Tensors).

    Returns ``(params, state)`` for convenience; both are mutated.
    """
    if state.lr < 0:
        raise ConfigError("learning rate must be non-negative")
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise DimensionError("adam_step: params, grads and state lengths differ")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        arr = _arr(p)
        if g is None:
            g = np.zeros_like(arr)
        if g.shape != arr.shape or m.shape != arr.shape:
            raise DimensionError(f"adam_step: gradient {g.shape} vs parameter {arr.shape}")
        g = g.astype(arr.dtype, copy=False)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        arr -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(arr.dtype, copy=False)
    return params, state


class Adam:
    """Stateful wrapper holding a fixed, ordered parameter list."""

    def __init__(self, params, lr=5e-5, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        ids = [id(p) for p in self.params]
        if len(set(ids)) != len(ids):
            raise ConfigError("the same parameter was registered twice")
        self.state = AdamState.fresh(self.params, lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def parameter_count(self):
        return int(sum(p.data.size for p in self.params))
