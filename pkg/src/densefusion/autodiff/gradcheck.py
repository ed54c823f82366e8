"""Central finite-difference gradient checking."""
from __future__ import annotations

import numpy as np

from .tensor import Tape, backward


def numerical_grad(fn, tensor, eps=1e-5):
    """d fn() / d tensor by central differences; ``fn`` returns a scalar Tensor."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn().data)
        flat[i] = orig - eps
        fm = float(fn().data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic, numeric):
    """max |a - n| / max(|a|, |n|, floor), the floor keeping near-zero gradients honest."""
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-8)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def check_gradients(fn, tensors, eps=1e-5):
    """Largest relative error over ``tensors`` between analytic and numeric gradients."""
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = fn()
    backward(loss, tape)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(analytic, numerical_grad(fn, t, eps)))
    return worst
