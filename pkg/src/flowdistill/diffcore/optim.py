from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter, ShapeError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Parameter], grads: dict[str, np.ndarray]) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and g.shape != p.shape:
            raise ShapeError(f"adam: gradient for {name!r} has shape {g.shape}, param {p.shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ShapeError(f"adam: moment for {name!r} has shape {m.shape}, param {p.shape}")
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype, copy=False)


class Adam:
    def __init__(self, params: dict[str, Parameter], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self, grads: dict[str, np.ndarray]) -> None:
        adam_step(self.state, self.params, grads)
