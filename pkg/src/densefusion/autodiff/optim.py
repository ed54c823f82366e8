"""Plain SGD and Adam updates over a name -> Tensor parameter dict."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ShapeMismatch


def _check(params, grads):
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != params[name].shape:
            raise ShapeMismatch(f"{name}: parameter {params[name].shape} vs gradient {np.shape(g)}")


def sgd_step(params, grads, lr):
    _check(params, grads)
    for name, g in grads.items():
        params[name].data = params[name].data - lr * g
    return params


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    _check(params, grads)
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        params[name].data = params[name].data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


def collect_grads(params):
    """Gradients currently held by ``params`` (zeros where none arrived)."""
    return {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in params.items()}


def zero_grads(params):
    for p in params.values():
        p.grad = None
