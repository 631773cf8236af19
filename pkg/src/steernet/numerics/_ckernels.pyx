# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of ``_pykernels``. Same signatures, same semantics."""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, expf, log, sqrt

cnp.import_array()


cdef inline floating _exp(floating v) noexcept nogil:
    if floating is float:
        return expf(v)
    else:
        return exp(v)


cdef inline floating _tanh(floating v) noexcept nogil:
    # tanh via a single exp; clamp keeps exp finite in single precision
    cdef floating e
    if v > 15:
        return 1
    if v < -15:
        return -1
    e = _exp(2 * v)
    return (e - 1) / (e + 1)

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def layer_norm_fwd(floating[:, ::1] x, floating[::1] gain, floating[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    mean_arr = np.empty(n, dtype=dtype)
    rstd_arr = np.empty(n, dtype=dtype)
    cdef floating[:, ::1] y = y_arr
    cdef floating[::1] mean = mean_arr
    cdef floating[::1] rstd = rstd_arr
    cdef double acc, mu, var, r, c
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(d):
                acc += x[i, j]
            mu = acc / d
            acc = 0.0
            for j in range(d):
                c = x[i, j] - mu
                acc += c * c
            var = acc / d
            r = 1.0 / sqrt(var + eps)
            mean[i] = <floating>mu
            rstd[i] = <floating>r
            for j in range(d):
                y[i, j] = <floating>((x[i, j] - mu) * r * gain[j] + bias[j])
    return y_arr, mean_arr, rstd_arr


def layer_norm_bwd(floating[:, ::1] dy, floating[:, ::1] x, floating[::1] mean,
                   floating[::1] rstd, floating[::1] gain):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.empty((n, d), dtype=dtype)
    dg_acc = np.zeros(d, dtype=np.float64)
    db_acc = np.zeros(d, dtype=np.float64)
    cdef floating[:, ::1] dx = dx_arr
    cdef double[::1] dg = dg_acc
    cdef double[::1] db = db_acc
    cdef double s1, s2, xh, dxh, r, mu
    with nogil:
        for i in range(n):
            mu = mean[i]
            r = rstd[i]
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                xh = (x[i, j] - mu) * r
                dxh = dy[i, j] * gain[j]
                dg[j] += dy[i, j] * xh
                db[j] += dy[i, j]
                s1 += dxh
                s2 += dxh * xh
            s1 /= d
            s2 /= d
            for j in range(d):
                xh = (x[i, j] - mu) * r
                dxh = dy[i, j] * gain[j]
                dx[i, j] = <floating>((dxh - s1 - xh * s2) * r)
    return dx_arr, dg_acc.astype(dtype), db_acc.astype(dtype)


def softmax_fwd(floating[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    cdef floating[:, ::1] y = y_arr
    cdef floating mx, e, inv
    cdef double s
    with nogil:
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, d):
                if x[i, j] > mx:
                    mx = x[i, j]
            for j in range(d):
                y[i, j] = _exp(x[i, j] - mx)
            s = 0.0
            for j in range(d):
                s += y[i, j]
            inv = <floating>(1.0 / s)
            for j in range(d):
                y[i, j] = y[i, j] * inv
    return y_arr


def softmax_bwd(floating[:, ::1] y, floating[:, ::1] dy):
    cdef Py_ssize_t n = y.shape[0], d = y.shape[1], i, j
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.empty((n, d), dtype=dtype)
    cdef floating[:, ::1] dx = dx_arr
    cdef double acc
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(d):
                acc += dy[i, j] * y[i, j]
            for j in range(d):
                dx[i, j] = <floating>(y[i, j] * (dy[i, j] - acc))
    return dx_arr


def _gelu_fwd_flat(floating[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty(n, dtype=dtype)
    cdef floating[::1] y = y_arr
    cdef floating v, c = <floating>GELU_C, a = <floating>GELU_A
    with nogil:
        for i in range(n):
            v = x[i]
            y[i] = <floating>0.5 * v * (1 + _tanh(c * (v + a * v * v * v)))
    return y_arr


def _gelu_bwd_flat(floating[::1] x, floating[::1] dy):
    cdef Py_ssize_t n = x.shape[0], i
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.empty(n, dtype=dtype)
    cdef floating[::1] dx = dx_arr
    cdef floating v, t, du, c = <floating>GELU_C, a = <floating>GELU_A
    with nogil:
        for i in range(n):
            v = x[i]
            t = _tanh(c * (v + a * v * v * v))
            du = c * (1 + 3 * a * v * v)
            dx[i] = dy[i] * (<floating>0.5 * (1 + t) + <floating>0.5 * v * (1 - t * t) * du)
    return dx_arr


def gelu_fwd(x):
    x = np.ascontiguousarray(x)
    return _gelu_fwd_flat(x.reshape(-1)).reshape(x.shape)


def gelu_bwd(x, dy):
    x = np.ascontiguousarray(x)
    dy = np.ascontiguousarray(dy, dtype=x.dtype)
    return _gelu_bwd_flat(x.reshape(-1), dy.reshape(-1)).reshape(x.shape)


def xent_fwd(floating[:, ::1] logits, cnp.int64_t[::1] targets):
    cdef Py_ssize_t n = logits.shape[0], d = logits.shape[1], i, j
    dtype = np.float32 if floating is float else np.float64
    probs_arr = np.empty((n, d), dtype=dtype)
    nll_arr = np.empty(n, dtype=dtype)
    cdef floating[:, ::1] probs = probs_arr
    cdef floating[::1] nll = nll_arr
    cdef double mx, s, e
    with nogil:
        for i in range(n):
            mx = logits[i, 0]
            for j in range(1, d):
                if logits[i, j] > mx:
                    mx = logits[i, j]
            s = 0.0
            for j in range(d):
                e = exp(logits[i, j] - mx)
                probs[i, j] = <floating>e
                s += e
            nll[i] = <floating>(log(s) - (logits[i, targets[i]] - mx))
            s = 1.0 / s
            for j in range(d):
                probs[i, j] = <floating>(probs[i, j] * s)
    return nll_arr, probs_arr


def _adam_flat(floating[::1] p, floating[::1] g, floating[::1] m, floating[::1] v,
               double lr, double beta1, double beta2, double eps, double bc1, double bc2):
    cdef Py_ssize_t n = p.shape[0], i
    cdef double mi, vi, gi, step = lr / bc1
    with nogil:
        for i in range(n):
            gi = g[i]
            mi = beta1 * m[i] + (1.0 - beta1) * gi
            vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
            m[i] = <floating>mi
            v[i] = <floating>vi
            p[i] = <floating>(p[i] - step * mi / (sqrt(vi / bc2) + eps))


def adam_update(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    _adam_flat(p.reshape(-1), np.ascontiguousarray(g, dtype=p.dtype).reshape(-1),
               m.reshape(-1), v.reshape(-1), lr, beta1, beta2, eps, bc1, bc2)
