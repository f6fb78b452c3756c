# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels.

Same contracts as pybackend: C-contiguous float64 rank-2 arrays, row-wise
reductions over the second axis, single-threaded deterministic loops.
The fused loops avoid the intermediate temporaries the numpy versions
allocate, which is where the speedup comes from.
"""

import numpy as np

from libc.math cimport exp, sqrt, tanh

cdef double GELU_C = sqrt(2.0 / 3.14159265358979323846)
cdef double GELU_A = 0.044715


def gelu(double[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1], i, j
    out_arr = np.empty((rows, cols), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double v, inner
    for i in range(rows):
        for j in range(cols):
            v = x[i, j]
            inner = GELU_C * (v + GELU_A * v * v * v)
            out[i, j] = 0.5 * v * (1.0 + tanh(inner))
    return out_arr


def gelu_backward(double[:, ::1] x, double[:, ::1] dy):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1], i, j
    out_arr = np.empty((rows, cols), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double v, inner, t, d_inner
    for i in range(rows):
        for j in range(cols):
            v = x[i, j]
            inner = GELU_C * (v + GELU_A * v * v * v)
            t = tanh(inner)
            d_inner = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
            out[i, j] = dy[i, j] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner)
    return out_arr


def softmax_rows(double[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1], i, j
    out_arr = np.empty((rows, cols), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double row_max, total, e
    for i in range(rows):
        row_max = x[i, 0]
        for j in range(1, cols):
            if x[i, j] > row_max:
                row_max = x[i, j]
        total = 0.0
        for j in range(cols):
            e = exp(x[i, j] - row_max)
            out[i, j] = e
            total += e
        for j in range(cols):
            out[i, j] /= total
    return out_arr


def softmax_rows_backward(double[:, ::1] p, double[:, ::1] dp):
    cdef Py_ssize_t rows = p.shape[0], cols = p.shape[1], i, j
    out_arr = np.empty((rows, cols), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double inner
    for i in range(rows):
        inner = 0.0
        for j in range(cols):
            inner += dp[i, j] * p[i, j]
        for j in range(cols):
            out[i, j] = p[i, j] * (dp[i, j] - inner)
    return out_arr


def layer_norm_rows(double[:, ::1] x, double[::1] gain, double[::1] bias, double eps):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1], i, j
    y_arr = np.empty((rows, cols), dtype=np.float64)
    mean_arr = np.empty(rows, dtype=np.float64)
    rstd_arr = np.empty(rows, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[::1] mean = mean_arr
    cdef double[::1] rstd = rstd_arr
    cdef double mu, var, c, r
    for i in range(rows):
        mu = 0.0
        for j in range(cols):
            mu += x[i, j]
        mu /= cols
        var = 0.0
        for j in range(cols):
            c = x[i, j] - mu
            var += c * c
        var /= cols
        r = 1.0 / sqrt(var + eps)
        mean[i] = mu
        rstd[i] = r
        for j in range(cols):
            y[i, j] = (x[i, j] - mu) * r * gain[j] + bias[j]
    return y_arr, mean_arr, rstd_arr


def layer_norm_rows_backward(double[:, ::1] x, double[::1] gain,
                             double[::1] mean, double[::1] rstd,
                             double[:, ::1] dy):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1], i, j
    dx_arr = np.empty((rows, cols), dtype=np.float64)
    dgain_arr = np.zeros(cols, dtype=np.float64)
    dbias_arr = np.zeros(cols, dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgain = dgain_arr
    cdef double[::1] dbias = dbias_arr
    cdef double mu, r, m1, m2, xhat, dxhat
    for i in range(rows):
        mu = mean[i]
        r = rstd[i]
        m1 = 0.0
        m2 = 0.0
        for j in range(cols):
            xhat = (x[i, j] - mu) * r
            dxhat = dy[i, j] * gain[j]
            m1 += dxhat
            m2 += dxhat * xhat
            dgain[j] += dy[i, j] * xhat
            dbias[j] += dy[i, j]
        m1 /= cols
        m2 /= cols
        for j in range(cols):
            xhat = (x[i, j] - mu) * r
            dxhat = dy[i, j] * gain[j]
            dx[i, j] = r * (dxhat - m1 - xhat * m2)
    return dx_arr, dgain_arr, dbias_arr


def adam_update(double[:, ::1] param, double[:, ::1] grad,
                double[:, ::1] m, double[:, ::1] v,
                long step, double lr, double beta1, double beta2,
                double eps, double weight_decay):
    cdef Py_ssize_t rows = param.shape[0], cols = param.shape[1], i, j
    cdef double bc1 = 1.0 - beta1 ** step
    cdef double bc2 = 1.0 - beta2 ** step
    cdef double g, m_hat, v_hat, decay = 1.0 - lr * weight_decay
    for i in range(rows):
        for j in range(cols):
            if weight_decay != 0.0:
                param[i, j] *= decay
            g = grad[i, j]
            m[i, j] = beta1 * m[i, j] + (1.0 - beta1) * g
            v[i, j] = beta2 * v[i, j] + (1.0 - beta2) * g * g
            m_hat = m[i, j] / bc1
            v_hat = v[i, j] / bc2
            param[i, j] -= lr * m_hat / (sqrt(v_hat) + eps)
