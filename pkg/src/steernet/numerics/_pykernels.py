"""Reference numpy implementations of the fused row kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature
and semantics. Inputs are C-contiguous 2-D arrays (rows x features) unless
stated otherwise; outputs are freshly allocated.
"""

import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2/pi)
GELU_A = 0.044715


def layer_norm_fwd(x, gain, bias, eps):
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    var = (xc * xc).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd[:, None] * gain + bias
    return y.astype(x.dtype, copy=False), mean, rstd.astype(x.dtype, copy=False)


def layer_norm_bwd(dy, x, mean, rstd, gain):
    n = x.shape[1]
    xhat = (x - mean[:, None]) * rstd[:, None]
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * gain
    dx = (dxhat - dxhat.mean(axis=1, keepdims=True)
          - xhat * (dxhat * xhat).sum(axis=1, keepdims=True) / n) * rstd[:, None]
    return dx.astype(x.dtype, copy=False), dgain, dbias


def softmax_fwd(x):
    z = x - x.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def softmax_bwd(y, dy):
    return y * (dy - (dy * y).sum(axis=1, keepdims=True))


def gelu_fwd(x):
    x2 = x * x
    t = x2 * GELU_A
    t += 1.0
    t *= x
    t *= GELU_C
    np.tanh(t, out=t)
    t += 1.0
    t *= x
    t *= 0.5
    return t


def gelu_bwd(x, dy):
    # in-place chain to keep temporaries at two full-size buffers
    x2 = x * x
    t = x2 * GELU_A
    t += 1.0
    t *= x
    t *= GELU_C
    np.tanh(t, out=t)
    # du = c * (1 + 3a x^2), reusing x2
    x2 *= 3.0 * GELU_A
    x2 += 1.0
    x2 *= GELU_C
    # 0.5 * x * (1 - t^2) * du + 0.5 * (1 + t)
    x2 *= x
    x2 *= 1.0 - t * t
    x2 += 1.0 + t
    x2 *= 0.5
    x2 *= dy
    return x2


def xent_fwd(logits, targets):
    """Row-wise negative log-likelihood; returns (nll per row, softmax probs)."""
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    ez = np.exp(z)
    s = ez.sum(axis=1, keepdims=True)
    probs = ez / s
    rows = np.arange(logits.shape[0])
    nll = np.log(s[:, 0]) - z[rows, targets]
    return nll, probs


def adam_update(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    """In-place bias-corrected Adam update of ``p``, ``m`` and ``v`` (any shape)."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    denom = np.sqrt(v / bc2)
    denom += eps
    p -= (lr / bc1) * m / denom
