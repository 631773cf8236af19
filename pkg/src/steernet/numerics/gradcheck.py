"""Central finite-difference gradient checking (double precision)."""

import numpy as np

from .tensor import Tensor, get_tape, no_grad


def numerical_grad(fn, inputs, h=1e-6):
    """Central differences of scalar ``fn(*inputs)`` w.r.t. each input tensor."""
    grads = []
    with no_grad():
        for t in inputs:
            g = np.zeros_like(t.data, dtype=np.float64)
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                fp = float(fn(*inputs).data)
                flat[i] = old - h
                fm = float(fn(*inputs).data)
                flat[i] = old
                g.reshape(-1)[i] = (fp - fm) / (2 * h)
            grads.append(g)
    return grads


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn, inputs, h=1e-6):
    """Return the max relative error between analytic and numerical gradients.

    ``inputs`` are float64 tensors with ``requires_grad=True``; ``fn`` maps
    them to a scalar tensor.
    """
    for t in inputs:
        t.grad = None
    get_tape().clear()
    out = fn(*inputs)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad for t in inputs]
    numeric = numerical_grad(fn, inputs, h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def random_tensor(rng, shape, requires_grad=True, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad, dtype=np.float64)
