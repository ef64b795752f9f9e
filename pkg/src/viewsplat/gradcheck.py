"""Finite-difference verification of reverse-mode gradients.

The oracle perturbs every input element with central differences in float64
and never consults the tape, so it stays independent of the code it checks.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor


def numeric_gradients(f, arrays, eps: float = 1e-6):
    """Central-difference gradients of scalar f(*arrays) wrt each array."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = float(f(*arrays))
            flat[j] = orig - eps
            lo = float(f(*arrays))
            flat[j] = orig
            gflat[j] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def tape_gradients(f, arrays):
    """Reverse-mode gradients of scalar f(*tensors) wrt each input."""
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with Tape() as tape:
        loss = f(*tensors)
    tape.backward(loss)
    return [np.zeros(t.shape) if t.grad is None else t.grad for t in tensors]


def relative_error(analytic, numeric) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-10)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def max_gradient_error(f_tape, arrays, f_value=None, eps: float = 1e-6) -> float:
    """Worst relative error between tape and finite-difference gradients.

    f_tape builds the scalar loss from Tensors; f_value (default: f_tape on
    constant Tensors) evaluates the same scalar from plain arrays.
    """
    if f_value is None:
        def f_value(*arrs):
            return f_tape(*[Tensor(a, dtype=np.float64) for a in arrs]).item()

    analytic = tape_gradients(f_tape, arrays)
    numeric = numeric_gradients(f_value, arrays, eps=eps)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
